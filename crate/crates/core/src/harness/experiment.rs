//! In-memory pipeline: generate a dataset, train a variant, score and
//! evaluate, without touching the disk. The on-disk stages reuse the same
//! scoring loop.

use rayon::prelude::*;

use super::config::{FeatureConfig, Method, RunConfig, Variant};
use crate::baselines;
use crate::calibration::{score_map, train, CalibrationModel, PairTokens, TrainOutcome};
use crate::error::{Error, Result};
use crate::features::{load_tokens, patch_mask};
use crate::image::{ImageF32, Mask};
use crate::metrics::{EvalReport, EvalSample, MethodEvaluator, MethodRow};
use crate::scene::{Generator, ImagePair, Split};

/// Pairs scored per parallel batch; bounds the number of live maps.
const SCORE_BATCH: usize = 8;

/// Calibration tokens for a pair: the built-in backbone, or token files
/// from `features.external`.
pub fn pair_tokens(pair: &ImagePair, features: &FeatureConfig) -> Result<PairTokens> {
    let anomalous = pair.gt_defect_mask.any();
    match &features.external {
        None => PairTokens::from_images(
            pair.id(),
            &pair.real,
            &pair.render,
            &pair.mask_w,
            anomalous,
            features.patch,
            features.mask_threshold,
        ),
        Some(root) => {
            let dir = root.join(pair.meta.split.name()).join(pair.id());
            let real = load_tokens(&dir.join("real.ttok"))?;
            let render = load_tokens(&dir.join("render.ttok"))?;
            let (w, h) = (pair.mask_w.width, pair.mask_w.height);
            if real.grid_w == 0 || w % real.grid_w != 0 || h % real.grid_h != 0 || w / real.grid_w != h / real.grid_h {
                return Err(Error::DimensionMismatch(format!(
                    "{}x{} token grid does not tile the {w}x{h} image",
                    real.grid_w, real.grid_h
                )));
            }
            let mask = patch_mask(&pair.mask_w, w / real.grid_w, features.mask_threshold)?;
            PairTokens::new(pair.id(), real, render, mask, anomalous)
        }
    }
}

/// Anomaly map of one method at image resolution, zero off the foreground.
pub fn score_pair(method: Method, pair: &ImagePair, tokens: Option<&PairTokens>, model: Option<&CalibrationModel>) -> Result<ImageF32> {
    match method {
        Method::Avatar => {
            let (tokens, model) = tokens.zip(model).ok_or_else(|| {
                Error::InvalidArgument("method `avatar` needs tokens and a trained model".into())
            })?;
            score_map(tokens, model, pair.real.height, pair.real.width, Some(&pair.mask_w))
        }
        Method::Rgb => baselines::rgb_residual(pair),
        Method::Grad => baselines::gradient_residual(pair),
        Method::Ssim => baselines::ssim_residual(pair),
    }
}

/// Every method's map for one test pair.
pub(crate) struct Scored {
    pub id: String,
    pub gt: Mask,
    pub foreground: Mask,
    pub maps: Vec<ImageF32>,
}

/// Scores `n` pairs in parallel batches and streams them into one evaluator
/// per method; `sink` sees every scored pair in index order.
pub(crate) fn evaluate_stream<F, S>(methods: &[Method], fpr_limit: f64, n: usize, score: F, mut sink: S) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<Scored> + Sync,
    S: FnMut(&Scored) -> Result<()>,
{
    let mut evals: Vec<MethodEvaluator> = methods.iter().map(|m| MethodEvaluator::new(m.name(), fpr_limit)).collect();
    for start in (0..n).step_by(SCORE_BATCH) {
        let batch: Vec<Scored> = (start..(start + SCORE_BATCH).min(n))
            .into_par_iter()
            .map(&score)
            .collect::<Result<_>>()?;
        for s in &batch {
            sink(s)?;
            for (ev, map) in evals.iter_mut().zip(&s.maps) {
                ev.push(&EvalSample {
                    id: &s.id,
                    map,
                    gt: &s.gt,
                    foreground: &s.foreground,
                })?;
            }
        }
    }
    let rows = evals.into_iter().map(MethodEvaluator::finish).collect::<Result<_>>()?;
    Ok(EvalReport { rows })
}

/// A generated dataset held in memory: train tokens and test pairs with
/// their tokens.
pub struct Experiment {
    pub config: RunConfig,
    train_tokens: Vec<PairTokens>,
    test: Vec<(ImagePair, PairTokens)>,
}

impl Experiment {
    /// Generates the dataset of `config.dataset`; train images are reduced
    /// to tokens as they are produced.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let gen = Generator::new(&config.dataset)?;
        let plans = gen.plans();
        let train_tokens = plans
            .par_iter()
            .filter(|p| p.split == Split::Train)
            .map(|p| pair_tokens(&gen.pair(p)?, &config.features))
            .collect::<Result<Vec<_>>>()?;
        let test = plans
            .par_iter()
            .filter(|p| p.split == Split::Test)
            .map(|p| {
                let pair = gen.pair(p)?;
                let tokens = pair_tokens(&pair, &config.features)?;
                Ok((pair, tokens))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Experiment {
            config: config.clone(),
            train_tokens,
            test,
        })
    }

    pub fn train_tokens(&self) -> &[PairTokens] {
        &self.train_tokens
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = &ImagePair> {
        self.test.iter().map(|(p, _)| p)
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    pub fn train(&self, variant: Variant) -> Result<TrainOutcome> {
        train(&self.train_tokens, &variant.train_config(&self.config.train))
    }

    /// Evaluates `methods` on the test split; `model` is required for
    /// `avatar` only.
    pub fn evaluate(&self, methods: &[Method], model: Option<&CalibrationModel>) -> Result<EvalReport> {
        evaluate_stream(
            methods,
            self.config.eval.fpr_limit,
            self.test.len(),
            |i| {
                let (pair, tokens) = &self.test[i];
                let maps = methods
                    .iter()
                    .map(|&m| score_pair(m, pair, Some(tokens), model))
                    .collect::<Result<_>>()?;
                Ok(Scored {
                    id: pair.id().to_string(),
                    gt: pair.gt_defect_mask.clone(),
                    foreground: pair.mask_w.clone(),
                    maps,
                })
            },
            |_| Ok(()),
        )
    }

    /// Trains `variant` and evaluates its calibrated maps; the row is named
    /// after the variant.
    pub fn ablate_variant(&self, variant: Variant) -> Result<(MethodRow, TrainOutcome)> {
        let outcome = self.train(variant)?;
        let report = self.evaluate(&[Method::Avatar], Some(&outcome.model))?;
        let mut row = report.rows.into_iter().next().expect("one method");
        row.method = variant.name().to_string();
        Ok((row, outcome))
    }
}

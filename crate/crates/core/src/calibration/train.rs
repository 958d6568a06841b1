//! AdamW training over shuffled minibatches of normal pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward_backward_t, CalibrationModel, Lambdas, LossParts, PairTokens, BUILTIN_EMBED_DIM};
use crate::error::{Error, Result};
use crate::features::BUILTIN_DIM;
use crate::seeds;

/// Float type used for the forward/backward passes during training.
/// Weights and optimizer state are always kept in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub seed: u64,
    /// Embedding width; `None` picks 32 for the built-in descriptor and
    /// `dim_in` otherwise.
    pub d: Option<usize>,
    pub learned_phi_r: bool,
    pub learned_phi_s: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_local: 1.0,
            lambda_global: 1.0,
            seed: 0,
            d: None,
            learned_phi_r: true,
            learned_phi_s: true,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |p: &str, r: &str| Err(Error::config(format!("train.{p}"), r));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.lambda_local >= 0.0 && self.lambda_local.is_finite()) {
            return bad("lambda_local", "must be non-negative");
        }
        if !(self.lambda_global >= 0.0 && self.lambda_global.is_finite()) {
            return bad("lambda_global", "must be non-negative");
        }
        if self.d == Some(0) {
            return bad("d", "must be positive");
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            local: self.lambda_local,
            global: self.lambda_global,
        }
    }

    pub fn embed_dim(&self, dim_in: usize) -> usize {
        self.d
            .unwrap_or(if dim_in == BUILTIN_DIM { BUILTIN_EMBED_DIM } else { dim_in })
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CalibrationModel,
    pub history: Vec<EpochLoss>,
}

fn check_pairs(pairs: &[PairTokens]) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("training needs at least one pair".into()))?;
    for p in pairs {
        if p.anomalous {
            return Err(Error::AnomalousTrainingPair { pair_id: p.id.clone() });
        }
        if p.real.dim != first.real.dim {
            return Err(Error::ShapeMismatch(format!(
                "pair {} has token dim {}, expected {}",
                p.id, p.real.dim, first.real.dim
            )));
        }
        p.check()?;
    }
    Ok(())
}

/// Trains a freshly initialized model.
pub fn train(pairs: &[PairTokens], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_pairs(pairs)?;
    let dim_in = pairs[0].real.dim;
    let model = CalibrationModel::init(
        dim_in,
        config.embed_dim(dim_in),
        config.learned_phi_r,
        config.learned_phi_s,
        config.seed,
    )?;
    train_from(pairs, config, model)
}

/// Continues training from `model`.
pub fn train_from(pairs: &[PairTokens], config: &TrainConfig, mut model: CalibrationModel) -> Result<TrainOutcome> {
    config.validate()?;
    check_pairs(pairs)?;
    model.validate()?;
    if pairs[0].real.dim != model.dim_in {
        return Err(Error::ShapeMismatch(format!(
            "tokens have dim {}, model expects {}",
            pairs[0].real.dim, model.dim_in
        )));
    }
    let lambdas = config.lambdas();
    let mut opt = AdamW::new(model.param_count(), config);
    let mut params = model.flat_params();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = seeds::rng(seeds::derive_seed(config.seed, "epoch-shuffle", epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for batch in order.chunks(config.batch) {
            let results: Vec<Result<(LossParts, CalibrationModel)>> = match config.precision {
                Precision::F32 => {
                    let m32 = model.cast::<f32>();
                    batch
                        .par_iter()
                        .map(|&i| forward_backward_t::<f32>(&pairs[i], &m32, lambdas))
                        .collect()
                }
                Precision::F64 => batch
                    .par_iter()
                    .map(|&i| forward_backward_t::<f64>(&pairs[i], &model, lambdas))
                    .collect(),
            };
            // reduce in batch order so the result does not depend on scheduling
            let mut grad = vec![0.0f64; params.len()];
            for r in results {
                let (lp, g) = r?;
                sums[0] += lp.local;
                sums[1] += lp.global;
                sums[2] += lp.total;
                let mut at = 0;
                for t in g.tensors() {
                    for (acc, v) in grad[at..at + t.len()].iter_mut().zip(t) {
                        *acc += v;
                    }
                    at += t.len();
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            opt.step(&mut params, &grad);
            model.set_flat_params(&params);
        }
        let n = pairs.len() as f64;
        let row = EpochLoss {
            epoch,
            local: sums[0] / n,
            global: sums[1] / n,
            total: sums[2] / n,
        };
        log::info!(
            "epoch {:>3}: L_local {:.5} L_global {:.5} L_total {:.5}",
            epoch,
            row.local,
            row.global,
            row.total
        );
        history.push(row);
    }
    if !model.is_finite() {
        return Err(Error::InvalidArgument("training diverged to non-finite weights".into()));
    }
    Ok(TrainOutcome { model, history })
}

pub fn write_loss_csv(history: &[EpochLoss], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,L_local,L_global,L_total\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.local, r.global, r.total));
    }
    crate::image::write_file(path, s.as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochLoss>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format {
            offset: ln,
            reason: format!("malformed loss row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(EpochLoss {
            epoch: f[0].parse().map_err(|_| bad())?,
            local: f[1].parse().map_err(|_| bad())?,
            global: f[2].parse().map_err(|_| bad())?,
            total: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

//! Ranking metrics (AUROC, AP, F1-max), AUPRO, and per-method reports.
//!
//! Pixel-level inputs are large and mostly exact zeros (masked background),
//! so scores equal to 0 are counted rather than stored.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, MetricError, Result};
use crate::image::{ImageF32, Mask};

pub type MetricResult<T> = std::result::Result<T, MetricError>;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
/// Number of quantile thresholds in the AUPRO sweep.
pub const AUPRO_STEPS: usize = 200;

/// Equal-score groups in descending score order: `(score, positives, negatives)`.
#[derive(Debug, Clone, Default)]
pub struct ScoreGroups {
    groups: Vec<(f32, u64, u64)>,
    pos: u64,
    neg: u64,
}

/// Collects `(score, label)` samples; exact zeros are only counted.
#[derive(Debug, Clone, Default)]
pub struct RankAccumulator {
    samples: Vec<(f32, bool)>,
    zero_pos: u64,
    zero_neg: u64,
}

impl RankAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f32, positive: bool) {
        if score == 0.0 {
            if positive {
                self.zero_pos += 1;
            } else {
                self.zero_neg += 1;
            }
        } else {
            self.samples.push((score, positive));
        }
    }

    pub fn len(&self) -> u64 {
        self.samples.len() as u64 + self.zero_pos + self.zero_neg
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn groups(mut self) -> ScoreGroups {
        self.samples.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut out = ScoreGroups::default();
        let mut zeros_done = self.zero_pos + self.zero_neg == 0;
        let push = |g: &mut ScoreGroups, s: f32, p: u64, n: u64| {
            g.pos += p;
            g.neg += n;
            match g.groups.last_mut() {
                Some(last) if last.0 == s => {
                    last.1 += p;
                    last.2 += n;
                }
                _ => g.groups.push((s, p, n)),
            }
        };
        for &(s, lab) in &self.samples {
            if !zeros_done && s < 0.0 {
                push(&mut out, 0.0, self.zero_pos, self.zero_neg);
                zeros_done = true;
            }
            push(&mut out, s, lab as u64, (!lab) as u64);
        }
        if !zeros_done {
            push(&mut out, 0.0, self.zero_pos, self.zero_neg);
        }
        out
    }
}

fn groups_of(scores: &[f64], labels: &[bool]) -> MetricResult<ScoreGroups> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch);
    }
    // f64 inputs keep full precision: group on exact f64 equality
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = ScoreGroups::default();
    let mut last: Option<f64> = None;
    for i in idx {
        let (p, n) = (labels[i] as u64, (!labels[i]) as u64);
        out.pos += p;
        out.neg += n;
        if last == Some(scores[i]) {
            let g = out.groups.last_mut().expect("group exists");
            g.1 += p;
            g.2 += n;
        } else {
            out.groups.push((scores[i] as f32, p, n));
            last = Some(scores[i]);
        }
    }
    Ok(out)
}

impl ScoreGroups {
    pub fn positives(&self) -> u64 {
        self.pos
    }

    pub fn negatives(&self) -> u64 {
        self.neg
    }

    /// Probability that a positive outranks a negative, ties counted ½.
    pub fn auroc(&self) -> MetricResult<f64> {
        if self.pos == 0 || self.neg == 0 {
            return Err(MetricError::SingleClass);
        }
        let mut neg_below = self.neg as f64;
        let mut wins = 0.0;
        for &(_, p, n) in &self.groups {
            neg_below -= n as f64;
            wins += p as f64 * (neg_below + 0.5 * n as f64);
        }
        Ok(wins / (self.pos as f64 * self.neg as f64))
    }

    pub fn average_precision(&self) -> MetricResult<f64> {
        if self.pos == 0 {
            return Err(MetricError::NoPositives);
        }
        let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
        for &(_, p, n) in &self.groups {
            tp += p;
            fp += n;
            if p > 0 {
                ap += (p as f64 / self.pos as f64) * (tp as f64 / (tp + fp) as f64);
            }
        }
        Ok(ap)
    }

    pub fn f1_max(&self) -> MetricResult<f64> {
        if self.pos == 0 {
            return Err(MetricError::NoPositives);
        }
        let (mut tp, mut fp, mut best) = (0u64, 0u64, 0.0f64);
        for &(_, p, n) in &self.groups {
            tp += p;
            fp += n;
            best = best.max(2.0 * tp as f64 / (tp + fp + self.pos) as f64);
        }
        Ok(best)
    }
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> MetricResult<f64> {
    groups_of(scores, labels)?.auroc()
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> MetricResult<f64> {
    groups_of(scores, labels)?.average_precision()
}

pub fn f1_max(scores: &[f64], labels: &[bool]) -> MetricResult<f64> {
    groups_of(scores, labels)?.f1_max()
}

/// Ascending multiset of scores with exact zeros counted.
#[derive(Debug, Clone, Default)]
struct SortedScores {
    below: Vec<f32>,
    zeros: u64,
    above: Vec<f32>,
}

impl SortedScores {
    fn push(&mut self, v: f32) {
        if v == 0.0 {
            self.zeros += 1;
        } else if v < 0.0 {
            self.below.push(v);
        } else {
            self.above.push(v);
        }
    }

    fn finish(&mut self) {
        self.below.sort_unstable_by(f32::total_cmp);
        self.above.sort_unstable_by(f32::total_cmp);
    }

    fn len(&self) -> u64 {
        self.below.len() as u64 + self.zeros + self.above.len() as u64
    }

    fn at(&self, k: u64) -> f32 {
        let nb = self.below.len() as u64;
        if k < nb {
            self.below[k as usize]
        } else if k < nb + self.zeros {
            0.0
        } else {
            self.above[(k - nb - self.zeros) as usize]
        }
    }

    fn count_ge(&self, t: f32) -> u64 {
        let ge = |v: &[f32]| (v.len() - v.partition_point(|&x| x < t)) as u64;
        ge(&self.below) + if 0.0 >= t { self.zeros } else { 0 } + ge(&self.above)
    }
}

/// Streams score maps and ground-truth masks for AUPRO.
#[derive(Debug, Clone, Default)]
pub struct ProAccumulator {
    regions: Vec<Vec<f32>>,
    negatives: SortedScores,
    pooled: SortedScores,
}

impl ProAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, map: &ImageF32, gt: &Mask) -> MetricResult<()> {
        if map.width != gt.width || map.height != gt.height {
            return Err(MetricError::LengthMismatch);
        }
        let (labels, n) = gt.components();
        let first = self.regions.len();
        self.regions.extend((0..n).map(|_| Vec::new()));
        for (i, &v) in map.data.iter().enumerate() {
            self.pooled.push(v);
            match labels[i] {
                0 => self.negatives.push(v),
                l => self.regions[first + l as usize - 1].push(v),
            }
        }
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    /// Normalized area under the PRO-vs-FPR curve up to `fpr_limit`.
    pub fn finish(mut self, fpr_limit: f64) -> MetricResult<f64> {
        if self.regions.is_empty() {
            return Err(MetricError::NoAnomalousRegions);
        }
        assert!(fpr_limit > 0.0 && fpr_limit <= 1.0, "fpr_limit must lie in (0, 1]");
        self.negatives.finish();
        self.pooled.finish();
        for r in &mut self.regions {
            r.sort_unstable_by(f32::total_cmp);
        }
        let n = self.pooled.len();
        let mut thresholds: Vec<f32> = (0..=AUPRO_STEPS)
            .map(|i| {
                let k = ((i as f64) * (n - 1) as f64 / AUPRO_STEPS as f64).round() as u64;
                self.pooled.at(k)
            })
            .collect();
        thresholds.dedup();
        let neg_total = self.negatives.len().max(1) as f64;
        let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
        for &t in &thresholds {
            let fpr = self.negatives.count_ge(t) as f64 / neg_total;
            let pro = self
                .regions
                .iter()
                .map(|r| (r.len() - r.partition_point(|&x| x < t)) as f64 / r.len() as f64)
                .sum::<f64>()
                / self.regions.len() as f64;
            curve.push((fpr, pro));
        }
        Ok(trapezoid_to(&mut curve, fpr_limit) / fpr_limit)
    }
}

/// Trapezoid area of a monotone curve from x = 0 to `limit`, interpolating at the limit.
pub(crate) fn trapezoid_to(curve: &mut [(f64, f64)], limit: f64) -> f64 {
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

pub fn aupro(maps: &[ImageF32], gts: &[Mask], fpr_limit: f64) -> MetricResult<f64> {
    if maps.len() != gts.len() {
        return Err(MetricError::LengthMismatch);
    }
    let mut acc = ProAccumulator::new();
    for (m, g) in maps.iter().zip(gts) {
        acc.push(m, g)?;
    }
    acc.finish(fpr_limit)
}

/// One row of the comparison table; metrics in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub i_auroc: f64,
    pub i_ap: f64,
    pub i_f1max: f64,
    pub p_auroc: f64,
    pub p_ap: f64,
    pub p_f1max: f64,
    pub aupro: f64,
    pub pairs: usize,
    pub anomalous: usize,
}

impl MethodRow {
    pub fn values(&self) -> [f64; 7] {
        [
            self.i_auroc,
            self.i_ap,
            self.i_f1max,
            self.p_auroc,
            self.p_ap,
            self.p_f1max,
            self.aupro,
        ]
    }

    /// Mean of the three image-level metrics.
    pub fn image_level(&self) -> f64 {
        (self.i_auroc + self.i_ap + self.i_f1max) / 3.0
    }

    /// Mean of the four pixel-level metrics.
    pub fn pixel_level(&self) -> f64 {
        (self.p_auroc + self.p_ap + self.p_f1max + self.aupro) / 4.0
    }
}

pub const COLUMNS: [&str; 7] = ["I-AUROC", "I-AP", "I-F1", "P-AUROC", "P-AP", "P-F1", "AUPRO"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}", "Method");
        for c in COLUMNS.iter().chain(&["Image", "Pixel"]) {
            let _ = write!(s, " {c:>8}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}", r.method);
            for v in r.values().iter().chain(&[r.image_level(), r.pixel_level()]) {
                let _ = write!(s, " {:>8.2}", v * 100.0);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("method,{}\n", COLUMNS.join(","));
        for r in &self.rows {
            s.push_str(&r.method);
            for v in r.values() {
                let _ = write!(s, ",{:.2}", v * 100.0);
            }
            s.push('\n');
        }
        s
    }
}

/// One test pair as seen by the evaluator.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub id: &'a str,
    pub map: &'a ImageF32,
    pub gt: &'a Mask,
    pub foreground: &'a Mask,
}

fn metric<T>(name: &'static str, r: MetricResult<T>) -> Result<T> {
    r.map_err(|source| Error::Metric { metric: name, source })
}

/// Streaming evaluation of one method: feed every pair, then `finish`.
pub struct MethodEvaluator {
    method: String,
    image_scores: Vec<f64>,
    image_labels: Vec<bool>,
    pixels: RankAccumulator,
    pro: ProAccumulator,
    fpr_limit: f64,
}

impl MethodEvaluator {
    pub fn new(method: impl Into<String>, fpr_limit: f64) -> Self {
        MethodEvaluator {
            method: method.into(),
            image_scores: Vec::new(),
            image_labels: Vec::new(),
            pixels: RankAccumulator::new(),
            pro: ProAccumulator::new(),
            fpr_limit,
        }
    }

    pub fn push(&mut self, s: &EvalSample) -> Result<()> {
        if s.map.width != s.gt.width || s.map.height != s.gt.height {
            return Err(Error::ShapeMismatch(format!("pair {}: map and gt sizes differ", s.id)));
        }
        self.image_scores.push(crate::calibration::image_score(s.map, Some(s.foreground)));
        self.image_labels.push(s.gt.any());
        for (&v, &g) in s.map.data.iter().zip(&s.gt.data) {
            self.pixels.push(v, g);
        }
        metric("AUPRO", self.pro.push(s.map, s.gt))
    }

    pub fn finish(self) -> Result<MethodRow> {
        let pairs = self.image_scores.len();
        let anomalous = self.image_labels.iter().filter(|&&l| l).count();
        let img = metric("I-AUROC", groups_of(&self.image_scores, &self.image_labels))?;
        let px = self.pixels.groups();
        Ok(MethodRow {
            method: self.method,
            i_auroc: metric("I-AUROC", img.auroc())?,
            i_ap: metric("I-AP", img.average_precision())?,
            i_f1max: metric("I-F1", img.f1_max())?,
            p_auroc: metric("P-AUROC", px.auroc())?,
            p_ap: metric("P-AP", px.average_precision())?,
            p_f1max: metric("P-F1", px.f1_max())?,
            aupro: metric("AUPRO", self.pro.finish(self.fpr_limit))?,
            pairs,
            anomalous,
        })
    }
}

/// Evaluates in-memory maps for one method.
pub fn evaluate_samples(method: &str, samples: &[EvalSample], fpr_limit: f64) -> Result<MethodRow> {
    let mut ev = MethodEvaluator::new(method, fpr_limit);
    for s in samples {
        ev.push(s)?;
    }
    ev.finish()
}

/// Score-map lookup used by [`evaluate`]: `None` means the map is missing.
pub trait ScoreSource {
    fn load(&self, method: &str, pair_id: &str) -> Result<Option<ImageF32>>;
}

/// Test-split ground truth: `(id, gt, foreground)`.
pub type GroundTruth = Vec<(String, Mask, Mask)>;

/// Evaluates every method over the whole test split.
pub fn evaluate(truth: &GroundTruth, scores: &dyn ScoreSource, methods: &[String], fpr_limit: f64) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let mut ev = MethodEvaluator::new(m.clone(), fpr_limit);
        for (id, gt, fg) in truth {
            let map = scores.load(m, id)?.ok_or_else(|| Error::MissingScores {
                method: m.clone(),
                pair_id: id.clone(),
            })?;
            ev.push(&EvalSample {
                id,
                map: &map,
                gt,
                foreground: fg,
            })?;
        }
        rows.push(ev.finish()?);
    }
    Ok(EvalReport { rows })
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    use crate::image::write_file;
    write_file(&dir.join("report.txt"), report.to_table().as_bytes())?;
    write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::json(dir.join("report.json"), e))?;
    write_file(&dir.join("report.json"), &json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_block_is_ordered_among_signed_scores() {
        let mut acc = RankAccumulator::new();
        for (s, l) in [(0.5, true), (0.0, false), (-0.5, false), (0.0, true), (-1.0, true)] {
            acc.push(s, l);
        }
        let g = acc.groups();
        let scores: Vec<f32> = g.groups.iter().map(|x| x.0).collect();
        assert_eq!(scores, vec![0.5, 0.0, -0.5, -1.0]);
        assert_eq!(g.groups[1], (0.0, 1, 1));
        let direct = auroc(&[0.5, 0.0, -0.5, 0.0, -1.0], &[true, false, false, true, true]).unwrap();
        assert!((g.auroc().unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn sorted_scores_index_and_count() {
        let mut s = SortedScores::default();
        for v in [0.3, 0.0, -0.2, 0.0, 0.1] {
            s.push(v);
        }
        s.finish();
        let all: Vec<f32> = (0..s.len()).map(|k| s.at(k)).collect();
        assert_eq!(all, vec![-0.2, 0.0, 0.0, 0.1, 0.3]);
        assert_eq!(s.count_ge(0.0), 4);
        assert_eq!(s.count_ge(0.1), 2);
        assert_eq!(s.count_ge(-1.0), 5);
    }

    #[test]
    fn trapezoid_interpolates_at_limit() {
        let mut c = vec![(0.0, 0.0), (1.0, 1.0)];
        assert!((trapezoid_to(&mut c, 0.3) - 0.045).abs() < 1e-15);
    }

    #[test]
    fn table_and_csv_layout() {
        let r = EvalReport {
            rows: vec![MethodRow {
                method: "avatar".into(),
                i_auroc: 0.9,
                i_ap: 0.8,
                i_f1max: 0.7,
                p_auroc: 0.6,
                p_ap: 0.5,
                p_f1max: 0.4,
                aupro: 0.3,
                pairs: 4,
                anomalous: 2,
            }],
        };
        assert_eq!(
            r.to_csv(),
            "method,I-AUROC,I-AP,I-F1,P-AUROC,P-AP,P-F1,AUPRO\navatar,90.00,80.00,70.00,60.00,50.00,40.00,30.00\n"
        );
        assert!(r.to_table().contains("80.00"));
        assert!((r.rows[0].image_level() - 0.8).abs() < 1e-12);
        assert!((r.rows[0].pixel_level() - 0.45).abs() < 1e-12);
    }
}

//! Ablation runner: every variant on every seed, summarized as mean ± std.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::experiment::Experiment;
use crate::error::{Error, Result};
use crate::image::write_file;
use crate::metrics::MethodRow;

/// One trained and evaluated variant; `row.method` is the variant name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub row: MethodRow,
}

/// Mean and sample standard deviation over seeds, all in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub image_mean: f64,
    pub image_std: f64,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub p_ap_mean: f64,
    pub p_ap_std: f64,
    /// Mean of the image-level and pixel-level averages.
    pub combined_mean: f64,
    pub combined_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn combined(row: &MethodRow) -> f64 {
    (row.image_level() + row.pixel_level()) / 2.0
}

impl AblationReport {
    pub fn from_runs(runs: Vec<AblationRun>) -> Self {
        let mut order: Vec<String> = Vec::new();
        for r in &runs {
            if !order.contains(&r.row.method) {
                order.push(r.row.method.clone());
            }
        }
        let summary = order
            .into_iter()
            .map(|variant| {
                let rows: Vec<&MethodRow> = runs.iter().filter(|r| r.row.method == variant).map(|r| &r.row).collect();
                let stat = |f: &dyn Fn(&MethodRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (image_mean, image_std) = stat(&|r| r.image_level());
                let (pixel_mean, pixel_std) = stat(&|r| r.pixel_level());
                let (p_ap_mean, p_ap_std) = stat(&|r| r.p_ap);
                let (combined_mean, combined_std) = stat(&combined);
                VariantSummary {
                    variant,
                    seeds: rows.len(),
                    image_mean,
                    image_std,
                    pixel_mean,
                    pixel_std,
                    p_ap_mean,
                    p_ap_std,
                    combined_mean,
                    combined_std,
                }
            })
            .collect();
        AblationReport { runs, summary }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>15} {:>15} {:>15} {:>15}\n", "Variant", "Image", "Pixel", "P-AP", "Combined");
        let pm = |m: f64, sd: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
        for v in &self.summary {
            let _ = writeln!(
                s,
                "{:<12} {:>15} {:>15} {:>15} {:>15}",
                v.variant,
                pm(v.image_mean, v.image_std),
                pm(v.pixel_mean, v.pixel_std),
                pm(v.p_ap_mean, v.p_ap_std),
                pm(v.combined_mean, v.combined_std)
            );
        }
        s
    }

    /// One line per run, metrics ×100.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("seed,variant,I-AUROC,I-AP,I-F1,P-AUROC,P-AP,P-F1,AUPRO,Image,Pixel\n");
        for r in &self.runs {
            let _ = write!(s, "{},{}", r.seed, r.row.method);
            for v in r.row.values().iter().chain(&[r.row.image_level(), r.row.pixel_level()]) {
                let _ = write!(s, ",{:.2}", 100.0 * v);
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("runs.csv"), self.runs_csv().as_bytes())?;
        write_file(&dir.join("summary.txt"), self.to_table().as_bytes())?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(dir.join("summary.json"), e))?;
        write_file(&dir.join("summary.json"), &json)
    }
}

/// Trains and evaluates each configured variant on each configured seed.
/// The dataset is regenerated per seed and shared by that seed's variants.
pub fn run_ablation(config: &RunConfig, mut progress: impl FnMut(&AblationRun)) -> Result<AblationReport> {
    let variants = config.variants()?;
    let mut runs = Vec::new();
    for &seed in &config.ablate.seeds {
        let exp = Experiment::new(&config.with_seed(seed))?;
        for &v in &variants {
            let (row, _) = exp.ablate_variant(v)?;
            let run = AblationRun { seed, row };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(AblationReport::from_runs(runs))
}

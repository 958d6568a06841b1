//! Pipeline orchestration behind the command-line tool.

mod ablation;
mod config;
mod experiment;
mod manifest;
mod stages;

pub use ablation::{combined, mean_std, run_ablation, AblationReport, AblationRun, VariantSummary};
pub use config::{
    parse_methods, AblateConfig, EvalConfig, FeatureConfig, Method, PlanConfig, PoseConfig, ReportConfig, RunConfig,
    Variant,
};
pub use experiment::{pair_tokens, score_pair, Experiment};
pub use manifest::{hash_tree, sha256_hex, tree_hash, FileHash, RunManifest, Seeds, MANIFEST_DIR};
pub use stages::{
    estimate_pose, map_to_tokens, panel, recorded_outputs, replay, run_stage, run_stage_in, PlanFile, PoseRecord,
    PoseSummary, Stage, DATASET_DIR, LOSS_FILE, MODEL_FILE,
};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "TWINSPECT_THREADS";

/// Caps the global worker pool at `TWINSPECT_THREADS` when set. Returns the
/// cap. Has no effect if the pool was already built.
pub fn configure_threads() -> Result<Option<usize>> {
    let raw = match std::env::var(THREADS_ENV) {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("worker pool already initialized");
    }
    Ok(Some(n))
}

//! Run configuration: one JSON tree covering every stage, with dotted-path
//! overrides from the command line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{DEFAULT_MASK_THRESHOLD, DEFAULT_PATCH};
use crate::metrics::DEFAULT_FPR_LIMIT;
use crate::pose::RefineOptions;
use crate::scene::{DatasetConfig, Split};

/// Scoring methods known to `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Avatar,
    Rgb,
    Grad,
    Ssim,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Avatar, Method::Rgb, Method::Grad, Method::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Method::Avatar => "avatar",
            Method::Rgb => "rgb",
            Method::Grad => "grad",
            Method::Ssim => "ssim",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Parses a comma-separated method list; blanks are skipped.
pub fn parse_methods(csv: &str) -> Result<Vec<Method>> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Method::from_str)
        .collect()
}

/// Ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoPReal,
    NoPRender,
    NoLocal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoPReal, Variant::NoPRender, Variant::NoLocal, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPReal => "no_p_real",
            Variant::NoPRender => "no_p_render",
            Variant::NoLocal => "no_local",
        }
    }

    /// Training config for this variant. Projector removal swaps in the
    /// identity (copy the first channels, zero-pad); `no_local` only changes
    /// the objective, scoring stays the same.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoPReal => c.learned_phi_r = false,
            Variant::NoPRender => c.learned_phi_s = false,
            Variant::NoLocal => c.lambda_local = 0.0,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub mesh: String,
    pub target_count: usize,
    pub radius: f64,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            mesh: "joint_bracket".into(),
            target_count: 100,
            radius: 0.3,
            elev_min_deg: 20.0,
            elev_max_deg: 80.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    pub split: Split,
    /// Pairs processed, in manifest order.
    pub max_pairs: usize,
    /// Template views for the coarse match.
    pub templates: usize,
    pub refine: RefineOptions,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_pairs: 8,
            templates: 64,
            refine: RefineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub patch: usize,
    pub mask_threshold: f64,
    /// Directory of externally computed tokens laid out as
    /// `<split>/<pair_id>/{real,render}.ttok`; built-in backbone when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            external: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<String>,
    pub fpr_limit: f64,
    /// Also write every score map to `scores/<method>/<pair_id>.ttok`.
    pub save_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            fpr_limit: DEFAULT_FPR_LIMIT,
            save_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Each seed regenerates the dataset and re-initializes training.
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Test pairs rendered as score-map panels.
    pub max_maps: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { max_maps: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub plan: PlanConfig,
    pub pose: PoseConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `path=value` overrides. Values parse as JSON when they can
    /// and fall back to plain strings, so `train.epochs=5` and
    /// `dataset.train.mesh=flanged_block` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like path=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, path, value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::config("<overrides>", e.to_string()))
    }

    /// Sets the dataset and training seeds together.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.dataset.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.eval.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.ablate.variants.iter().map(|v| v.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset
            .validate()
            .map_err(|e| prefix("dataset", e))?;
        self.train.validate()?;
        if self.features.patch == 0 {
            return Err(Error::config("features.patch", "must be positive"));
        }
        if !(self.features.mask_threshold > 0.0 && self.features.mask_threshold <= 1.0) {
            return Err(Error::config("features.mask_threshold", "must lie in (0, 1]"));
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(Error::config("eval.fpr_limit", "must lie in (0, 1]"));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::config("eval.methods", "at least one method is required"));
        }
        self.methods()?;
        self.variants()?;
        if self.ablate.seeds.is_empty() {
            return Err(Error::config("ablate.seeds", "at least one seed is required"));
        }
        if self.pose.templates == 0 {
            return Err(Error::config("pose.templates", "must be positive"));
        }
        Ok(())
    }
}

fn prefix(head: &str, e: Error) -> Error {
    match e {
        Error::Config { path, reason } => Error::Config {
            path: format!("{head}.{path}"),
            reason,
        },
        other => other,
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("`{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            // optional leaves are omitted when unset, so allow creating them
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*key)
            .ok_or_else(|| Error::config(path, format!("unknown key `{key}`")))?;
    }
    unreachable!("split yields at least one key")
}

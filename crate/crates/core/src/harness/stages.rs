//! On-disk pipeline stages. Each stage reads its inputs from a run
//! directory, writes its outputs under a fixed sub-directory, and records a
//! manifest in `manifests/<stage>.json`.
//!
//! Layout: `dataset/`, `plan/plan.json`, `pose/`, `model/{model.calm,
//! loss.csv}`, `scores/<method>/<pair_id>.ttok`, `eval/report.*`,
//! `ablation/`, `report/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ablation::{run_ablation, AblationReport};
use super::config::{Method, RunConfig};
use super::experiment::{evaluate_stream, pair_tokens, score_pair, Scored};
use super::manifest::{hash_tree, mismatches, FileHash, RunManifest};
use crate::calibration::{load_model, save_model, train, write_loss_csv, CalibrationModel, PairTokens};
use crate::error::{Error, Result};
use crate::features::{save_tokens, PatchTokens};
use crate::geometry::sample_viewpoints;
use crate::image::{write_file, ImageF32};
use crate::metrics::{write_report, EvalReport};
use crate::pose::{coarse_pose_match, extract_foreground, pose_error, refine_pose};
use crate::render::render_mask_cam;
use crate::scene::{generate_dataset, load_pair, resolve_mesh, DatasetManifest, ImagePair, Split};

pub const DATASET_DIR: &str = "dataset";
pub const MODEL_FILE: &str = "model/model.calm";
pub const LOSS_FILE: &str = "model/loss.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Plan,
    Pose,
    Train,
    Eval,
    Ablate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Gen,
        Stage::Plan,
        Stage::Pose,
        Stage::Train,
        Stage::Eval,
        Stage::Ablate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Plan => "plan",
            Stage::Pose => "pose",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }

    /// Sub-directories owned (and cleared) by the stage.
    fn owned(self) -> &'static [&'static str] {
        match self {
            Stage::Gen => &[DATASET_DIR],
            Stage::Plan => &["plan"],
            Stage::Pose => &["pose"],
            Stage::Train => &["model"],
            Stage::Eval => &["eval", "scores"],
            Stage::Ablate => &["ablation"],
            Stage::Report => &["report"],
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Where a stage reads from and writes to. Normally the same directory;
/// replays read the original run and write elsewhere.
struct Dirs<'a> {
    input: &'a Path,
    output: &'a Path,
}

/// Runs `stage` in `run_dir` and writes its manifest.
pub fn run_stage(stage: Stage, config: &RunConfig, run_dir: &Path) -> Result<RunManifest> {
    run_stage_in(stage, config, run_dir, run_dir)
}

/// Runs `stage` with inputs from `input_dir` and outputs (plus manifest) in
/// `output_dir`.
pub fn run_stage_in(stage: Stage, config: &RunConfig, input_dir: &Path, output_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    for d in stage.owned() {
        let p = output_dir.join(d);
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let dirs = Dirs {
        input: input_dir,
        output: output_dir,
    };
    let inputs: Vec<String> = match stage {
        Stage::Gen => stage_gen(config, &dirs)?,
        Stage::Plan => stage_plan(config, &dirs)?,
        Stage::Pose => stage_pose(config, &dirs)?,
        Stage::Train => stage_train(config, &dirs)?,
        Stage::Eval => stage_eval(config, &dirs)?,
        Stage::Ablate => stage_ablate(config, &dirs)?,
        Stage::Report => stage_report(config, &dirs)?,
    };
    let mut input_hashes = Vec::new();
    for rel in inputs {
        input_hashes.extend(hash_tree(input_dir, &rel)?);
    }
    let mut outputs = Vec::new();
    for d in stage.owned() {
        outputs.extend(hash_tree(output_dir, d)?);
    }
    let manifest = RunManifest::new(stage.name(), config, input_hashes, outputs);
    manifest.write(output_dir)?;
    Ok(manifest)
}

/// Re-executes a recorded stage from its manifest alone into `scratch` and
/// returns the output paths whose bytes differ. Inputs are read from
/// `run_dir` and must still match their recorded hashes.
pub fn replay(run_dir: &Path, stage: Stage, scratch: &Path) -> Result<Vec<String>> {
    let recorded = RunManifest::load(run_dir, stage.name())?;
    let stale = mismatches(run_dir, &recorded.inputs)?;
    if !stale.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "inputs of stage `{}` changed since it ran: {}",
            stage.name(),
            stale.join(", ")
        )));
    }
    let fresh = run_stage_in(stage, &recorded.config, run_dir, scratch)?;
    let mut diff: Vec<String> = Vec::new();
    for f in &recorded.outputs {
        if !fresh.outputs.contains(f) {
            diff.push(f.path.clone());
        }
    }
    for f in &fresh.outputs {
        if !recorded.outputs.iter().any(|r| r.path == f.path) {
            diff.push(f.path.clone());
        }
    }
    Ok(diff)
}

fn dataset_root(dirs: &Dirs) -> PathBuf {
    dirs.input.join(DATASET_DIR)
}

fn test_pairs(root: &Path) -> Result<(DatasetManifest, Vec<String>)> {
    let manifest = DatasetManifest::load(root)?;
    let ids = manifest.ids(Split::Test).map(str::to_string).collect();
    Ok((manifest, ids))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn stage_gen(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let m = generate_dataset(&config.dataset, &dirs.output.join(DATASET_DIR))?;
    log::info!("generated {} pairs", m.pairs.len());
    Ok(Vec::new())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub mesh: String,
    pub viewpoints: crate::geometry::ViewpointPlan,
    pub elevations_deg: Vec<f64>,
}

fn stage_plan(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let p = &config.plan;
    let mesh = resolve_mesh("plan.mesh", &p.mesh)?;
    let (center, _) = mesh.bounding_sphere();
    let plan = sample_viewpoints(&center, p.radius, p.target_count, p.elev_min_deg, p.elev_max_deg)?;
    let file = PlanFile {
        mesh: p.mesh.clone(),
        elevations_deg: plan.elevations_deg(),
        viewpoints: plan,
    };
    write_file(&dirs.output.join("plan/plan.json"), &to_json(&file))?;
    Ok(Vec::new())
}

/// Pose recovery for one pair, from its real image alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    pub truth: [f64; 12],
    pub coarse: [f64; 12],
    pub refined: [f64; 12],
    pub coarse_rot_err_deg: f64,
    pub coarse_trans_err: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub iou_coarse: f64,
    pub iou_refined: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSummary {
    pub pairs: usize,
    pub within_1deg_1pct: usize,
    pub iou_improved: usize,
    pub mean_rot_err_deg: f64,
    pub mean_trans_err: f64,
}

pub fn estimate_pose(pair: &ImagePair, templates: usize, config: &RunConfig) -> Result<PoseRecord> {
    let mesh = resolve_mesh("pose", &pair.meta.mesh)?;
    let k = &pair.meta.view.intrinsics;
    let (center, _) = mesh.bounding_sphere();
    let plan = sample_viewpoints(
        &center,
        config.dataset.camera_distance,
        templates,
        config.dataset.elev_min_deg,
        config.dataset.elev_max_deg,
    )?;
    let s0 = extract_foreground(&pair.real)?;
    let coarse = coarse_pose_match(&s0, &mesh, k, &plan)?;
    let refined = refine_pose(&s0, &mesh, k, &coarse.pose, &config.pose.refine)?;
    let truth = pair.meta.view.t_obj_cam();
    let (cr, ct) = pose_error(&coarse.pose, &truth);
    let (rr, rt) = pose_error(&refined.pose, &truth);
    Ok(PoseRecord {
        id: pair.id().to_string(),
        truth: truth.to_array(),
        coarse: coarse.pose.to_array(),
        refined: refined.pose.to_array(),
        coarse_rot_err_deg: cr,
        coarse_trans_err: ct,
        rot_err_deg: rr,
        trans_err: rt,
        iou_coarse: render_mask_cam(&mesh, &coarse.pose, k).iou(&s0),
        iou_refined: render_mask_cam(&mesh, &refined.pose, k).iou(&s0),
        iterations: refined.iterations,
    })
}

fn stage_pose(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let root = dataset_root(dirs);
    let manifest = DatasetManifest::load(&root)?;
    let split = config.pose.split;
    let ids: Vec<&str> = manifest.ids(split).take(config.pose.max_pairs).collect();
    let mut inputs = vec![format!("{DATASET_DIR}/manifest.json")];
    let mut records = Vec::with_capacity(ids.len());
    for id in &ids {
        inputs.push(format!("{DATASET_DIR}/{}/{id}", split.name()));
        let pair = load_pair(&root, split, id)?;
        let rec = estimate_pose(&pair, config.pose.templates, config)?;
        log::info!("pose {id}: {:.3} deg, {:.4} rel", rec.rot_err_deg, rec.trans_err);
        records.push(rec);
    }
    let n = records.len().max(1) as f64;
    let summary = PoseSummary {
        pairs: records.len(),
        within_1deg_1pct: records.iter().filter(|r| r.rot_err_deg <= 1.0 && r.trans_err <= 0.01).count(),
        iou_improved: records.iter().filter(|r| r.iou_refined > r.iou_coarse).count(),
        mean_rot_err_deg: records.iter().map(|r| r.rot_err_deg).sum::<f64>() / n,
        mean_trans_err: records.iter().map(|r| r.trans_err).sum::<f64>() / n,
    };
    write_file(&dirs.output.join("pose/poses.json"), &to_json(&records))?;
    write_file(&dirs.output.join("pose/summary.json"), &to_json(&summary))?;
    Ok(inputs)
}

fn load_tokens_for(root: &Path, split: Split, ids: &[String], config: &RunConfig) -> Result<Vec<PairTokens>> {
    use rayon::prelude::*;
    ids.par_iter()
        .map(|id| pair_tokens(&load_pair(root, split, id)?, &config.features))
        .collect()
}

fn stage_train(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let root = dataset_root(dirs);
    let manifest = DatasetManifest::load(&root)?;
    let ids: Vec<String> = manifest.ids(Split::Train).map(str::to_string).collect();
    let tokens = load_tokens_for(&root, Split::Train, &ids, config)?;
    let outcome = train(&tokens, &config.train)?;
    save_model(&outcome.model, &dirs.output.join(MODEL_FILE))?;
    write_loss_csv(&outcome.history, &dirs.output.join(LOSS_FILE))?;
    if let Some(last) = outcome.history.last() {
        log::info!("trained {} epochs, final loss {:.5}", outcome.history.len(), last.total);
    }
    Ok(vec![
        format!("{DATASET_DIR}/manifest.json"),
        format!("{DATASET_DIR}/{}", Split::Train.name()),
    ])
}

fn model_if_needed(methods: &[Method], dirs: &Dirs, inputs: &mut Vec<String>) -> Result<Option<CalibrationModel>> {
    if methods.contains(&Method::Avatar) {
        inputs.push(MODEL_FILE.to_string());
        Ok(Some(load_model(&dirs.input.join(MODEL_FILE))?))
    } else {
        Ok(None)
    }
}

fn score_loaded(
    root: &Path,
    id: &str,
    methods: &[Method],
    model: Option<&CalibrationModel>,
    config: &RunConfig,
) -> Result<(ImagePair, Scored)> {
    let pair = load_pair(root, Split::Test, id)?;
    let tokens = if model.is_some() {
        Some(pair_tokens(&pair, &config.features)?)
    } else {
        None
    };
    let maps = methods
        .iter()
        .map(|&m| score_pair(m, &pair, tokens.as_ref(), model))
        .collect::<Result<_>>()?;
    let scored = Scored {
        id: id.to_string(),
        gt: pair.gt_defect_mask.clone(),
        foreground: pair.mask_w.clone(),
        maps,
    };
    Ok((pair, scored))
}

/// Score maps are stored as one-channel token grids at image resolution.
pub fn map_to_tokens(map: &ImageF32) -> PatchTokens {
    PatchTokens {
        grid_h: map.height,
        grid_w: map.width,
        dim: 1,
        data: map.data.clone(),
    }
}

fn stage_eval(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let methods = config.methods()?;
    let root = dataset_root(dirs);
    let (_, ids) = test_pairs(&root)?;
    let mut inputs = vec![
        format!("{DATASET_DIR}/manifest.json"),
        format!("{DATASET_DIR}/{}", Split::Test.name()),
    ];
    let model = model_if_needed(&methods, dirs, &mut inputs)?;
    let report = evaluate_stream(
        &methods,
        config.eval.fpr_limit,
        ids.len(),
        |i| score_loaded(&root, &ids[i], &methods, model.as_ref(), config).map(|(_, s)| s),
        |s| {
            if config.eval.save_maps {
                for (m, map) in methods.iter().zip(&s.maps) {
                    let path = dirs.output.join("scores").join(m.name()).join(format!("{}.ttok", s.id));
                    save_tokens(&map_to_tokens(map), &path)?;
                }
            }
            Ok(())
        },
    )?;
    write_report(&report, &dirs.output.join("eval"))?;
    log::info!("\n{}", report.to_table());
    Ok(inputs)
}

fn stage_ablate(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let report = run_ablation(config, |run| {
        log::info!(
            "seed {} {}: image {:.2} pixel {:.2} P-AP {:.2}",
            run.seed,
            run.row.method,
            100.0 * run.row.image_level(),
            100.0 * run.row.pixel_level(),
            100.0 * run.row.p_ap
        );
    })?;
    report.write(&dirs.output.join("ablation"))?;
    log::info!("\n{}", report.to_table());
    Ok(Vec::new())
}

/// Round-robin over defect kinds so every kind gets a panel early.
fn panel_ids(manifest: &DatasetManifest, max: usize) -> Vec<String> {
    let mut by_kind: Vec<Vec<&str>> = Vec::new();
    let mut kinds = Vec::new();
    for e in manifest.pairs.iter().filter(|e| e.split == Split::Test) {
        if let Some(k) = e.kind {
            match kinds.iter().position(|&x| x == k) {
                Some(i) => by_kind[i].push(&e.id),
                None => {
                    kinds.push(k);
                    by_kind.push(vec![&e.id]);
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < max && by_kind.iter().any(|v| round < v.len()) {
        for v in &by_kind {
            if out.len() < max && round < v.len() {
                out.push(v[round].to_string());
            }
        }
        round += 1;
    }
    out
}

/// Real | render | ground truth | one normalized map per method.
pub fn panel(pair: &ImagePair, maps: &[ImageF32]) -> ImageF32 {
    let (w, h) = (pair.real.width, pair.real.height);
    let mut tiles = vec![pair.real.clone(), pair.render.clone(), pair.gt_defect_mask.to_image()];
    for m in maps {
        let (_, hi) = m.min_max();
        tiles.push(m.normalized(0.0, hi.max(1e-6)));
    }
    ImageF32::from_fn(w * tiles.len(), h, |x, y| tiles[x / w].get(x % w, y).clamp(0.0, 1.0))
}

fn stage_report(config: &RunConfig, dirs: &Dirs) -> Result<Vec<String>> {
    let mut inputs = Vec::new();
    let mut md = String::from("# Results\n");
    let eval_path = dirs.input.join("eval/report.json");
    let methods = if eval_path.exists() {
        inputs.push("eval/report.json".to_string());
        let text = std::fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::json(&eval_path, e))?;
        let _ = write!(md, "\n## Detection and localization (x100)\n\n```\n{}```\n", report.to_table());
        report.rows.iter().map(|r| r.method.parse()).collect::<Result<Vec<Method>>>()?
    } else {
        config.methods()?
    };
    let abl_path = dirs.input.join("ablation/summary.json");
    if abl_path.exists() {
        inputs.push("ablation/summary.json".to_string());
        let text = std::fs::read_to_string(&abl_path).map_err(|e| Error::io(&abl_path, e))?;
        let report: AblationReport = serde_json::from_str(&text).map_err(|e| Error::json(&abl_path, e))?;
        let _ = write!(md, "\n## Ablation, mean ± std over seeds (x100)\n\n```\n{}```\n", report.to_table());
    }

    let root = dataset_root(dirs);
    if root.join("manifest.json").exists() && config.report.max_maps > 0 {
        let mut model_inputs = Vec::new();
        let model = if methods.contains(&Method::Avatar) && dirs.input.join(MODEL_FILE).exists() {
            model_if_needed(&methods, dirs, &mut model_inputs)?
        } else {
            None
        };
        let methods: Vec<Method> = methods
            .into_iter()
            .filter(|&m| m != Method::Avatar || model.is_some())
            .collect();
        inputs.extend(model_inputs);
        inputs.push(format!("{DATASET_DIR}/manifest.json"));
        let manifest = DatasetManifest::load(&root)?;
        let names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
        let _ = write!(md, "\n## Score maps\n\nPanels: real | render | ground truth | {}\n\n", names.join(" | "));
        for id in panel_ids(&manifest, config.report.max_maps) {
            inputs.push(format!("{DATASET_DIR}/{}/{id}", Split::Test.name()));
            let (pair, scored) = score_loaded(&root, &id, &methods, model.as_ref(), config)?;
            let file = format!("maps/{id}.pgm");
            panel(&pair, &scored.maps).write_pgm(&dirs.output.join("report").join(&file))?;
            let kind = pair.meta.defect.as_ref().map_or("normal", |d| d.kind.name());
            let _ = writeln!(md, "- `{file}` ({kind})");
        }
    }
    write_file(&dirs.output.join("report/README.md"), md.as_bytes())?;
    Ok(inputs)
}

/// Output hashes of the last run of `stage`, if any.
pub fn recorded_outputs(run_dir: &Path, stage: Stage) -> Result<Vec<FileHash>> {
    Ok(RunManifest::load(run_dir, stage.name())?.outputs)
}

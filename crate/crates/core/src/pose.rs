//! Object pose from a single observation: foreground extraction, coarse
//! template matching over rendered views, and silhouette refinement by
//! Nelder–Mead over a soft-mask discrepancy.

use nalgebra::{Vector3, Vector6};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Se3Pose, ViewpointPlan};
use crate::image::{ImageF32, Mask};
use crate::mesh::TriMesh;
use crate::render::{render_mask_cam, soft_mask_cam};
use crate::seeds::{self, derive_seed};

/// Minimum foreground component size as a fraction of the image.
pub const MIN_FOREGROUND_FRAC: f64 = 0.001;
/// Coarse matching fails below this IoU.
pub const MIN_TEMPLATE_IOU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// Object pose in the camera frame.
    pub pose: Se3Pose,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Running minimum of the loss after each iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

const LOG_EPS: f64 = 1.0 / 255.0;

fn log_bin(v: f32) -> usize {
    let lo = LOG_EPS.ln();
    let hi = (1.0 + LOG_EPS).ln();
    let u = ((v.clamp(0.0, 1.0) as f64 + LOG_EPS).ln() - lo) / (hi - lo);
    (u * 255.0).round() as usize
}

fn log_bin_value(b: f64) -> f32 {
    let lo = LOG_EPS.ln();
    let hi = (1.0 + LOG_EPS).ln();
    ((lo + b / 255.0 * (hi - lo)).exp() - LOG_EPS) as f32
}

/// Bin index maximizing Otsu's between-class variance.
fn otsu_bin(hist: &[u64; 256]) -> usize {
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    best_t
}

/// Otsu threshold computed on log intensity.
///
/// Shaded objects on a dark background have a multimodal foreground; in the
/// linear domain Otsu tends to split off the dim faces, while the log domain
/// keeps all lit faces together against the background.
pub fn otsu_threshold(img: &ImageF32) -> f32 {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[log_bin(v)] += 1;
    }
    log_bin_value(otsu_bin(&hist) as f64 + 0.5)
}

/// Foreground of an observation: Otsu threshold, then the largest
/// 8-connected component.
pub fn extract_foreground(img: &ImageF32) -> Result<Mask> {
    let t = otsu_threshold(img);
    let raw = Mask {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| v > t).collect(),
    };
    let fg = raw.largest_component();
    if (fg.count() as f64) < MIN_FOREGROUND_FRAC * img.data.len() as f64 {
        return Err(Error::EmptyForeground);
    }
    Ok(fg)
}

fn centroid(m: &Mask) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

/// Best template view by mask IoU, with its distance rescaled so the mask
/// areas match and its lateral offset moved onto the observed centroid.
///
/// Template poses are camera-to-object poses with the object at the origin.
pub fn coarse_pose_match(s0: &Mask, mesh: &TriMesh, k: &CameraIntrinsics, templates: &ViewpointPlan) -> Result<PoseEstimate> {
    if !s0.any() {
        return Err(Error::EmptyForeground);
    }
    if templates.is_empty() {
        return Err(Error::InvalidArgument("no template views".into()));
    }
    let mut best: Option<(f64, Se3Pose, Mask)> = None;
    for t_cam in &templates.poses {
        let t_obj_cam = t_cam.inverse();
        let m = render_mask_cam(mesh, &t_obj_cam, k);
        let iou = m.iou(s0);
        if best.as_ref().is_none_or(|b| iou > b.0) {
            best = Some((iou, t_obj_cam, m));
        }
    }
    let (iou, pose, m) = best.expect("at least one template");
    if iou < MIN_TEMPLATE_IOU || !m.any() {
        return Err(Error::NoOverlap { best_iou: iou });
    }
    // area ∝ 1/z², so z scales by sqrt(area_template / area_observed)
    let scale = (m.count() as f64 / s0.count() as f64).sqrt();
    let mut t = pose.translation() * scale;
    let (cx_t, cy_t) = centroid(&m);
    let (cx_s, cy_s) = centroid(s0);
    t.x += (cx_s - cx_t) / k.fx * t.z;
    t.y += (cy_s - cy_t) / k.fy * t.z;
    let pose = Se3Pose::new(*pose.rotation(), t)?;
    Ok(PoseEstimate {
        residual: 1.0 - iou,
        pose,
        iterations: templates.len(),
        converged: true,
        trace: Vec::new(),
    })
}

/// Options for [`refine_pose`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    /// Iteration cap per annealing stage.
    pub max_iters: usize,
    /// Annealing stages (restarts), sharpness geometric from start to end.
    pub stages: usize,
    pub sharpness_start: f64,
    pub sharpness_end: f64,
    /// Initial simplex half-widths: rotation in degrees and translation as a
    /// fraction of the initial distance. Halved at each stage.
    pub step_rot_deg: f64,
    pub step_trans_frac: f64,
    /// Simplex diameter at which a stage counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iters: 400,
            stages: 3,
            sharpness_start: 5.0,
            sharpness_end: 50.0,
            step_rot_deg: 4.0,
            step_trans_frac: 0.03,
            tol: 1e-4,
            seed: 0,
        }
    }
}

impl RefineOptions {
    pub fn sharpness(&self, stage: usize) -> f64 {
        if self.stages <= 1 {
            return self.sharpness_end;
        }
        let f = stage as f64 / (self.stages - 1) as f64;
        self.sharpness_start * (self.sharpness_end / self.sharpness_start).powf(f)
    }
}

/// Mean squared difference between the soft silhouette and `s0`.
pub fn mask_loss(s0: &Mask, mesh: &TriMesh, k: &CameraIntrinsics, pose: &Se3Pose, sharpness: f64) -> f64 {
    let soft = soft_mask_cam(mesh, pose, k, sharpness);
    let sum: f64 = soft
        .data
        .iter()
        .zip(&s0.data)
        .map(|(&s, &t)| {
            let d = s as f64 - if t { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    sum / s0.data.len() as f64
}

/// Pose from the scaled search vector: left-multiplied axis-angle increment
/// (radians) and translation in units of the initial distance.
fn pose_at(init: &Se3Pose, scale: f64, x: &Vector6<f64>) -> Se3Pose {
    let dr = Se3Pose::from_axis_angle(Vector3::new(x[0], x[1], x[2]), Vector3::zeros());
    let rot = dr.rotation() * init.rotation();
    let t = Vector3::new(x[3], x[4], x[5]) * scale;
    Se3Pose::new(rot, t).unwrap_or_else(|_| Se3Pose::from_axis_angle(Vector3::zeros(), t))
}

/// Refines `init` by minimizing [`mask_loss`] with annealed sharpness.
///
/// Each stage restarts Nelder–Mead from the best point so far with a seeded
/// simplex orientation. The returned pose is the best one found at the final
/// sharpness, and never worse than `init` under that loss.
pub fn refine_pose(s0: &Mask, mesh: &TriMesh, k: &CameraIntrinsics, init: &Se3Pose, opts: &RefineOptions) -> Result<PoseEstimate> {
    if opts.max_iters == 0 || opts.stages == 0 {
        return Err(Error::InvalidArgument("max_iters and stages must be positive".into()));
    }
    if s0.width != k.width || s0.height != k.height {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs camera {}x{}",
            s0.width, s0.height, k.width, k.height
        )));
    }
    let scale = init.translation().norm();
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("initial pose must have nonzero distance".into()));
    }
    let t0 = init.translation() / scale;
    let mut x = Vector6::new(0.0, 0.0, 0.0, t0.x, t0.y, t0.z);

    let final_sharp = opts.sharpness(opts.stages - 1);
    let init_loss = mask_loss(s0, mesh, k, init, final_sharp);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut fx = f64::INFINITY;
    for stage in 0..opts.stages {
        let sharp = opts.sharpness(stage);
        let shrink = 0.5f64.powi(stage as i32);
        let mut steps = Vector6::from_fn(|i, _| {
            if i < 3 {
                opts.step_rot_deg.to_radians() * shrink
            } else {
                opts.step_trans_frac * shrink
            }
        });
        let mut rng = seeds::rng(derive_seed(opts.seed, "refine", stage as u64));
        for s in steps.iter_mut() {
            if rng.random::<bool>() {
                *s = -*s;
            }
        }
        let f = |v: &Vector6<f64>| mask_loss(s0, mesh, k, &pose_at(init, scale, v), sharp);
        let res = nelder_mead(f, x, &steps, opts.max_iters, opts.tol);
        iterations += res.iterations;
        converged = res.converged;
        x = res.x;
        fx = res.fx;
        for v in res.trace {
            let last = trace.last().copied().unwrap_or(f64::INFINITY);
            trace.push(v.min(last));
        }
    }

    let (pose, residual) = if fx <= init_loss {
        (pose_at(init, scale, &x), fx)
    } else {
        (init.clone(), init_loss)
    };
    Ok(PoseEstimate {
        pose,
        residual,
        iterations,
        converged,
        trace,
    })
}

struct NmResult {
    x: Vector6<f64>,
    fx: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Nelder–Mead with standard coefficients (reflect 1, expand 2, contract ½,
/// shrink ½). The initial simplex is `x0` plus one signed step per axis.
fn nelder_mead(
    f: impl Fn(&Vector6<f64>) -> f64,
    x0: Vector6<f64>,
    steps: &Vector6<f64>,
    max_iters: usize,
    tol: f64,
) -> NmResult {
    const N: usize = 6;
    let mut simplex: Vec<(Vector6<f64>, f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut v = x0;
        v[i] += steps[i];
        simplex.push((v, f(&v)));
    }
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| (v - simplex[0].0).norm())
            .fold(0.0, f64::max);
        if diameter < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid = simplex[..N].iter().map(|(v, _)| v).sum::<Vector6<f64>>() / N as f64;
        let (worst, f_worst) = simplex[N];
        let xr = centroid + (centroid - worst);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = centroid + (centroid - worst) * 2.0;
            let fe = f(&xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < f_worst {
                let xc = centroid + (xr - centroid) * 0.5;
                (xc, f(&xc))
            } else {
                let xc = centroid + (worst - centroid) * 0.5;
                (xc, f(&xc))
            };
            if fc < fr.min(f_worst) {
                simplex[N] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for (v, fv) in simplex.iter_mut().skip(1) {
                    *v = best + (*v - best) * 0.5;
                    *fv = f(v);
                }
            }
        }
        trace.push(simplex.iter().map(|s| s.1).fold(f64::INFINITY, f64::min));
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NmResult {
        x: simplex[0].0,
        fx: simplex[0].1,
        iterations,
        converged,
        trace,
    }
}

/// Rotation angle (degrees) and relative translation error between poses.
pub fn pose_error(estimate: &Se3Pose, truth: &Se3Pose) -> (f64, f64) {
    let rot = estimate.rotation_angle_to(truth).to_degrees();
    let trans = (estimate.translation() - truth.translation()).norm() / truth.translation().norm();
    (rot, trans)
}

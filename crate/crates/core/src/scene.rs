//! Twin simulator: turns a digital-twin render into a "real" observation by
//! re-rendering under pose jitter and applying a photometric domain gap, and
//! injects texture, structural and logical defects with exact ground truth.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, sample_viewpoints, CameraIntrinsics, Se3Pose};
use crate::image::{write_file, ImageF32, Mask};
use crate::mesh::{self, TriMesh};
use crate::render::{default_light, rasterize, render_mask, RasterOutput};
use crate::seeds::{self, derive_seed, Rng};

/// Nuisance parameters separating the real observation from its twin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub specular_count: usize,
    pub specular_radius_px: f64,
    pub jitter_rot_deg: f64,
    pub jitter_trans_frac: f64,
    pub seed: u64,
}

impl DomainParams {
    /// Parameters under which the real image equals the render.
    pub fn neutral(seed: u64) -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            specular_count: 0,
            specular_radius_px: 0.0,
            jitter_rot_deg: 0.0,
            jitter_trans_frac: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gain > 0.0
            && self.gamma > 0.0
            && self.noise_sigma >= 0.0
            && self.specular_radius_px >= 0.0
            && self.jitter_rot_deg >= 0.0
            && self.jitter_trans_frac >= 0.0
            && self.bias.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid domain parameters {self:?}")))
        }
    }
}

/// Sampling ranges for per-pair [`DomainParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainRanges {
    pub gain: [f64; 2],
    pub bias: [f64; 2],
    pub gamma: [f64; 2],
    pub noise_sigma: f64,
    pub specular_count: [usize; 2],
    pub specular_radius_px: [f64; 2],
    pub jitter_rot_deg: f64,
    pub jitter_trans_frac: f64,
}

impl Default for DomainRanges {
    fn default() -> Self {
        Self {
            gain: [0.8, 1.2],
            bias: [-0.05, 0.05],
            gamma: [0.9, 1.1],
            noise_sigma: 0.02,
            specular_count: [0, 3],
            specular_radius_px: [4.0, 10.0],
            jitter_rot_deg: 1.0,
            jitter_trans_frac: 0.01,
        }
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

impl DomainRanges {
    pub fn sample(&self, rng: &mut Rng, seed: u64) -> DomainParams {
        let [c0, c1] = self.specular_count;
        DomainParams {
            gain: uniform(rng, self.gain),
            bias: uniform(rng, self.bias),
            gamma: uniform(rng, self.gamma),
            noise_sigma: self.noise_sigma,
            specular_count: if c1 > c0 { rng.random_range(c0..=c1) } else { c0 },
            specular_radius_px: uniform(rng, self.specular_radius_px),
            jitter_rot_deg: self.jitter_rot_deg,
            jitter_trans_frac: self.jitter_trans_frac,
            seed,
        }
    }
}

/// Camera, object placement and light of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub t_obj_base: Se3Pose,
    pub t_cam_base: Se3Pose,
    pub intrinsics: CameraIntrinsics,
    pub light_dir: [f64; 3],
}

impl SceneView {
    pub fn light(&self) -> Vector3<f64> {
        Vector3::from(self.light_dir)
    }

    pub fn t_obj_cam(&self) -> Se3Pose {
        self.t_cam_base.inverse().compose(&self.t_obj_base)
    }

    pub fn rasterize(&self, mesh: &TriMesh) -> RasterOutput {
        rasterize(mesh, &self.t_obj_base, &self.t_cam_base, &self.intrinsics, &self.light())
    }

    pub fn mask(&self, mesh: &TriMesh) -> Mask {
        render_mask(mesh, &self.t_obj_base, &self.t_cam_base, &self.intrinsics)
    }
}

fn random_unit(rng: &mut Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rigid camera-frame perturbation: a rotation of up to `jitter_rot_deg`
/// about a random axis and a translation of up to `jitter_trans_frac` of the
/// object distance in a random direction.
fn sample_jitter(rng: &mut Rng, params: &DomainParams, distance: f64) -> Se3Pose {
    let axis = random_unit(rng);
    let angle = params.jitter_rot_deg.to_radians() * rng.random::<f64>();
    let dir = random_unit(rng);
    let mag = params.jitter_trans_frac * distance * rng.random::<f64>();
    Se3Pose::from_axis_angle(axis * angle, dir * mag)
}

/// Synthesizes the real observation for `render`.
///
/// Every modification is composited inside `render.mask` only, so pixels
/// outside the twin's foreground keep their render values.
pub fn synthesize_real(render: &RasterOutput, params: &DomainParams, mesh: &TriMesh, view: &SceneView) -> ImageF32 {
    let mut rng = seeds::rng(params.seed);
    let distance = view.t_obj_cam().translation().norm();
    let jitter = sample_jitter(&mut rng, params, distance);
    let jittered;
    let base = if params.jitter_rot_deg > 0.0 || params.jitter_trans_frac > 0.0 {
        let moved = SceneView {
            t_cam_base: view.t_cam_base.compose(&jitter),
            ..view.clone()
        };
        jittered = moved.rasterize(mesh).image;
        &jittered
    } else {
        &render.image
    };

    let mask = &render.mask;
    let (w, h) = (mask.width, mask.height);
    let mut out = render.image.clone();
    for i in 0..w * h {
        if mask.data[i] {
            let x = base.data[i] as f64;
            out.data[i] = (params.gain * x.powf(params.gamma) + params.bias) as f32;
        }
    }

    let fg: Vec<usize> = (0..w * h).filter(|&i| mask.data[i]).collect();
    if !fg.is_empty() && params.specular_radius_px > 0.0 {
        for _ in 0..params.specular_count {
            let c = fg[rng.random_range(0..fg.len())];
            let amp = 0.25 + 0.35 * rng.random::<f64>();
            add_blob(&mut out, mask, c % w, c / w, params.specular_radius_px, amp);
        }
    }

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).expect("sigma is finite and positive");
        for i in 0..w * h {
            let n: f64 = normal.sample(&mut rng);
            if mask.data[i] {
                out.data[i] = (out.data[i] as f64 + n) as f32;
            }
        }
    }

    for i in 0..w * h {
        if mask.data[i] {
            out.data[i] = out.data[i].clamp(0.0, 1.0);
        }
    }
    out
}

fn add_blob(img: &mut ImageF32, mask: &Mask, cx: usize, cy: usize, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    for y in (cy as isize - r).max(0)..=(cy as isize + r).min(h - 1) {
        for x in (cx as isize - r).max(0)..=(cx as isize + r).min(w - 1) {
            let i = (y * w + x) as usize;
            if mask.data[i] {
                let d2 = ((x - cx as isize).pow(2) + (y - cy as isize).pow(2)) as f64;
                img.data[i] = (img.data[i] as f64 + amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Texture,
    Structural,
    Logical,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Texture => "texture",
            DefectKind::Structural => "structural",
            DefectKind::Logical => "logical",
        }
    }
}

/// One injected defect.
///
/// `location` is in normalized image coordinates (`x / width`, `y / height`)
/// and must hit the rendered foreground. `magnitude` is the relative intensity
/// change for texture defects, the fill opacity for structural ones and the
/// part shift as a fraction of the object bounding-box diagonal for logical
/// ones. `part` selects the moved sub-part; by default the part whose
/// projected centroid is nearest `location`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub location: [f64; 2],
    pub size_frac: f64,
    pub magnitude: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Everything needed to regenerate a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub id: String,
    pub split: Split,
    pub mesh: String,
    pub seed: u64,
    pub view: SceneView,
    pub domain: DomainParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<DefectSpec>,
}

/// Pose-aligned real/render pair with foreground and defect masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub real: ImageF32,
    pub render: ImageF32,
    pub mask_w: Mask,
    pub gt_defect_mask: Mask,
    pub label: Label,
    pub meta: PairMeta,
}

impl ImagePair {
    /// Normal pair straight from a render and its synthesized real image.
    pub fn normal(render: RasterOutput, real: ImageF32, meta: PairMeta) -> Self {
        let (w, h) = (render.mask.width, render.mask.height);
        Self {
            real,
            render: render.image,
            mask_w: render.mask,
            gt_defect_mask: Mask::new(w, h),
            label: Label::Normal,
            meta,
        }
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }
}

fn ellipse_mask(w: usize, h: usize, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Mask {
    let (s, c) = theta.sin_cos();
    Mask::from_fn(w, h, |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = (dx * c + dy * s) / a;
        let v = (-dx * s + dy * c) / b;
        u * u + v * v <= 1.0
    })
}

fn object_diagonal(mesh: &TriMesh) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in mesh.vertices() {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    (hi - lo).norm()
}

fn part_centroid(mesh: &TriMesh, part: &str) -> Option<Vector3<f64>> {
    let idx = mesh.part_vertices(part)?;
    let sum: Vector3<f64> = idx.iter().map(|&i| mesh.vertices()[i]).sum();
    Some(sum / idx.len().max(1) as f64)
}

/// Injects `spec` into a normal pair. The render stays untouched.
pub fn inject_defect(pair: &ImagePair, spec: &DefectSpec, mesh: &TriMesh) -> Result<ImagePair> {
    if pair.label != Label::Normal {
        return Err(Error::AlreadyAnomalous);
    }
    if !(spec.magnitude > 0.0 && spec.magnitude.is_finite()) {
        return Err(Error::DegenerateDefect(format!(
            "magnitude must be positive, got {}",
            spec.magnitude
        )));
    }
    if !(spec.size_frac > 0.0 && spec.size_frac <= 0.5) {
        return Err(Error::DegenerateDefect(format!(
            "size_frac must lie in (0, 0.5], got {}",
            spec.size_frac
        )));
    }
    if spec.kind == DefectKind::Logical && !mesh.has_parts() {
        return Err(Error::PartRequired);
    }
    let (w, h) = (pair.mask_w.width, pair.mask_w.height);
    let [lx, ly] = spec.location;
    let (px, py) = (lx * w as f64, ly * h as f64);
    let inside = px >= 0.0
        && py >= 0.0
        && (px as usize) < w
        && (py as usize) < h
        && pair.mask_w.get(px as usize, py as usize);
    if !inside {
        return Err(Error::LocationOutsideForeground { x: lx, y: ly });
    }

    let mut rng = seeds::rng(spec.seed);
    let mut real = pair.real.clone();
    let gt = match spec.kind {
        DefectKind::Texture | DefectKind::Structural => {
            let (x0, y0, x1, y1) = pair.mask_w.bbox().expect("foreground is nonempty");
            let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
            let aspect = (0.6 * rng.random::<f64>() - 0.3).exp();
            let a = (spec.size_frac * bw / 2.0 * aspect).max(0.75);
            let b = (spec.size_frac * bh / 2.0 / aspect).max(0.75);
            let theta = std::f64::consts::PI * rng.random::<f64>();
            let gt = ellipse_mask(w, h, px, py, a, b, theta).and(&pair.mask_w);
            if spec.kind == DefectKind::Texture {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let factor = 1.0 + sign * spec.magnitude;
                for i in 0..w * h {
                    if gt.data[i] {
                        real.data[i] = ((real.data[i] as f64 * factor) as f32).clamp(0.0, 1.0);
                    }
                }
            } else {
                let (mean, std) = background_stats(&pair.real, &pair.mask_w);
                let alpha = spec.magnitude.min(1.0);
                for i in 0..w * h {
                    if gt.data[i] {
                        let z: f64 = rng.sample(StandardNormal);
                        let fill = mean + std * z;
                        let v = (1.0 - alpha) * real.data[i] as f64 + alpha * fill;
                        real.data[i] = (v as f32).clamp(0.0, 1.0);
                    }
                }
            }
            gt
        }
        DefectKind::Logical => {
            let view = &pair.meta.view;
            let part = match &spec.part {
                Some(p) => p.clone(),
                None => nearest_part(mesh, view, px, py).ok_or(Error::PartRequired)?,
            };
            let original_part = mesh.part_mesh(&part).ok_or(Error::PartRequired)?;
            let t_obj_cam = view.t_obj_cam();
            let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let dir_cam = Vector3::new(phi.cos(), phi.sin(), 0.0);
            let dir_obj = t_obj_cam.rotation().transpose() * dir_cam;
            let offset = dir_obj * spec.magnitude * object_diagonal(mesh);
            let moved = mesh.with_part_translated(&part, &offset)?;
            let moved_part = moved.part_mesh(&part).ok_or(Error::PartRequired)?;

            let gt = view.mask(&original_part).xor(&view.mask(&moved_part)).and(&pair.mask_w);
            let moved_render = view.rasterize(&moved);
            let staged = RasterOutput {
                image: moved_render.image,
                mask: pair.mask_w.clone(),
                depth: moved_render.depth,
            };
            let moved_real = synthesize_real(&staged, &pair.meta.domain, &moved, view);
            for i in 0..w * h {
                if gt.data[i] {
                    real.data[i] = moved_real.data[i];
                }
            }
            gt
        }
    };
    if !gt.any() {
        return Err(Error::DegenerateDefect("defect footprint is empty".into()));
    }
    let mut meta = pair.meta.clone();
    meta.defect = Some(spec.clone());
    Ok(ImagePair {
        real,
        render: pair.render.clone(),
        mask_w: pair.mask_w.clone(),
        gt_defect_mask: gt,
        label: Label::Anomalous,
        meta,
    })
}

fn background_stats(img: &ImageF32, mask: &Mask) -> (f64, f64) {
    let bg: Vec<f64> = img
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v as f64)
        .collect();
    if bg.is_empty() {
        return (0.0, 0.0);
    }
    let mean = bg.iter().sum::<f64>() / bg.len() as f64;
    let var = bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / bg.len() as f64;
    (mean, var.sqrt())
}

fn nearest_part(mesh: &TriMesh, view: &SceneView, px: f64, py: f64) -> Option<String> {
    let t = view.t_obj_cam();
    mesh.parts()
        .keys()
        .filter_map(|name| {
            let c = part_centroid(mesh, name)?;
            let uv = project_point(&t.transform_point(&c), &view.intrinsics)?;
            Some((name, (uv.x - px).powi(2) + (uv.y - py).powi(2)))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, _)| n.clone())
}

// ---------------------------------------------------------------------------
// dataset generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSplitConfig {
    pub mesh: String,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSplitConfig {
    pub mesh: String,
    pub normal: usize,
    pub texture: usize,
    pub structural: usize,
    pub logical: usize,
}

impl TestSplitConfig {
    pub fn total(&self) -> usize {
        self.normal + self.texture + self.structural + self.logical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectRanges {
    pub size_frac: [f64; 2],
    pub texture_magnitude: [f64; 2],
    pub structural_magnitude: [f64; 2],
    pub logical_shift: [f64; 2],
    pub logical_parts: Vec<String>,
}

impl Default for DefectRanges {
    fn default() -> Self {
        Self {
            size_frac: [0.1, 0.22],
            texture_magnitude: [0.3, 0.6],
            structural_magnitude: [1.0, 1.0],
            logical_shift: [0.08, 0.15],
            logical_parts: vec!["cap".into(), "bolt".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_size: usize,
    pub fov_deg: f64,
    pub camera_distance: f64,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
    pub train: TrainSplitConfig,
    pub test: TestSplitConfig,
    pub domain: DomainRanges,
    pub defects: DefectRanges,
}

impl Default for TrainSplitConfig {
    fn default() -> Self {
        Self {
            mesh: "flanged_block".into(),
            pairs: 216,
        }
    }
}

impl Default for TestSplitConfig {
    fn default() -> Self {
        Self {
            mesh: "joint_bracket".into(),
            normal: 46,
            texture: 56,
            structural: 56,
            logical: 56,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 504,
            fov_deg: 40.0,
            camera_distance: 0.3,
            elev_min_deg: 20.0,
            elev_max_deg: 80.0,
            train: TrainSplitConfig::default(),
            test: TestSplitConfig::default(),
            domain: DomainRanges::default(),
            defects: DefectRanges::default(),
        }
    }
}

fn check_range(path: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if r[0] <= r[1] && r[0] >= lo && r[1] <= hi && r[0].is_finite() && r[1].is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("range {r:?} must be ordered within [{lo}, {hi}]")))
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::config("fov_deg", "must lie in (0, 180)"));
        }
        if !(self.camera_distance > 0.0) {
            return Err(Error::config("camera_distance", "must be positive"));
        }
        if !(self.elev_min_deg <= self.elev_max_deg) {
            return Err(Error::config("elev_min_deg", "must not exceed elev_max_deg"));
        }
        if self.train.pairs == 0 {
            return Err(Error::config("train.pairs", "must be positive"));
        }
        if self.test.total() == 0 {
            return Err(Error::config("test", "at least one test pair is required"));
        }
        if self.train.mesh == self.test.mesh {
            return Err(Error::config(
                "test.mesh",
                "train and test categories must be disjoint",
            ));
        }
        resolve_mesh("train.mesh", &self.train.mesh)?;
        let test_mesh = resolve_mesh("test.mesh", &self.test.mesh)?;
        if self.test.logical > 0 {
            if !test_mesh.has_parts() {
                return Err(Error::config("test.mesh", "logical defects need a mesh with sub-parts"));
            }
            if self.defects.logical_parts.is_empty() {
                return Err(Error::config("defects.logical_parts", "must name at least one part"));
            }
            for p in &self.defects.logical_parts {
                if !test_mesh.parts().contains_key(p) {
                    return Err(Error::config("defects.logical_parts", format!("unknown part `{p}`")));
                }
            }
        }
        let d = &self.domain;
        check_range("domain.gain", d.gain, 1e-6, f64::MAX)?;
        check_range("domain.bias", d.bias, -1.0, 1.0)?;
        check_range("domain.gamma", d.gamma, 1e-6, f64::MAX)?;
        check_range("domain.specular_radius_px", d.specular_radius_px, 0.0, f64::MAX)?;
        if d.specular_count[0] > d.specular_count[1] {
            return Err(Error::config("domain.specular_count", "range must be ordered"));
        }
        if !(d.noise_sigma >= 0.0) {
            return Err(Error::config("domain.noise_sigma", "must be non-negative"));
        }
        if !(d.jitter_rot_deg >= 0.0) {
            return Err(Error::config("domain.jitter_rot_deg", "must be non-negative"));
        }
        if !(d.jitter_trans_frac >= 0.0) {
            return Err(Error::config("domain.jitter_trans_frac", "must be non-negative"));
        }
        let f = &self.defects;
        check_range("defects.size_frac", f.size_frac, 1e-6, 0.5)?;
        check_range("defects.texture_magnitude", f.texture_magnitude, 1e-6, f64::MAX)?;
        check_range("defects.structural_magnitude", f.structural_magnitude, 1e-6, f64::MAX)?;
        check_range("defects.logical_shift", f.logical_shift, 1e-6, f64::MAX)?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_fov(self.image_size, self.fov_deg)
    }
}

/// Built-in mesh name or path to an OFF file (with optional `.parts` sidecar).
pub fn resolve_mesh(field: &str, name: &str) -> Result<TriMesh> {
    if let Some(m) = mesh::builtin(name) {
        return Ok(m);
    }
    let path = Path::new(name);
    if path.exists() {
        return TriMesh::load(path).map_err(|e| Error::config(field, e.to_string()));
    }
    Err(Error::config(field, format!("unknown mesh `{name}`")))
}

/// Identity and seed of one pair to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub kind: Option<DefectKind>,
    pub seed: u64,
}

/// Meshes, viewpoints and per-pair plans resolved from a [`DatasetConfig`].
pub struct Generator {
    pub config: DatasetConfig,
    train_mesh: TriMesh,
    test_mesh: TriMesh,
    train_views: Vec<Se3Pose>,
    test_views: Vec<Se3Pose>,
    intrinsics: CameraIntrinsics,
    plans: Vec<PairPlan>,
}

const MAX_DEFECT_ATTEMPTS: u64 = 32;

impl Generator {
    pub fn new(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let train_mesh = resolve_mesh("train.mesh", &config.train.mesh)?;
        let test_mesh = resolve_mesh("test.mesh", &config.test.mesh)?;
        let views = |m: &TriMesh, n: usize, field: &str| -> Result<Vec<Se3Pose>> {
            let (center, _) = m.bounding_sphere();
            let plan = sample_viewpoints(&center, config.camera_distance, n, config.elev_min_deg, config.elev_max_deg)
                .map_err(|e| Error::config(field, e.to_string()))?;
            if plan.len() != n {
                return Err(Error::config(field, format!("planned {} of {n} viewpoints", plan.len())));
            }
            Ok(plan.poses)
        };
        let train_views = views(&train_mesh, config.train.pairs, "train.pairs")?;
        let test_views = views(&test_mesh, config.test.total(), "test")?;

        let mut plans: Vec<PairPlan> = (0..config.train.pairs)
            .map(|i| PairPlan {
                id: format!("train_{i:04}"),
                split: Split::Train,
                index: i,
                kind: None,
                seed: derive_seed(config.seed, "train", i as u64),
            })
            .collect();
        let t = &config.test;
        let mut kinds: Vec<Option<DefectKind>> = std::iter::repeat_n(None, t.normal)
            .chain(std::iter::repeat_n(Some(DefectKind::Texture), t.texture))
            .chain(std::iter::repeat_n(Some(DefectKind::Structural), t.structural))
            .chain(std::iter::repeat_n(Some(DefectKind::Logical), t.logical))
            .collect();
        kinds.shuffle(&mut seeds::rng(derive_seed(config.seed, "test-order", 0)));
        plans.extend(kinds.into_iter().enumerate().map(|(i, kind)| PairPlan {
            id: format!("test_{i:04}"),
            split: Split::Test,
            index: i,
            kind,
            seed: derive_seed(config.seed, "test", i as u64),
        }));
        Ok(Self {
            config: config.clone(),
            train_mesh,
            test_mesh,
            train_views,
            test_views,
            intrinsics: config.intrinsics()?,
            plans,
        })
    }

    pub fn plans(&self) -> &[PairPlan] {
        &self.plans
    }

    pub fn mesh(&self, split: Split) -> &TriMesh {
        match split {
            Split::Train => &self.train_mesh,
            Split::Test => &self.test_mesh,
        }
    }

    /// Generates one pair; images are quantized to the 8-bit storage grid so
    /// in-memory and on-disk pairs are identical.
    pub fn pair(&self, plan: &PairPlan) -> Result<ImagePair> {
        let (mesh, mesh_name, views) = match plan.split {
            Split::Train => (&self.train_mesh, &self.config.train.mesh, &self.train_views),
            Split::Test => (&self.test_mesh, &self.config.test.mesh, &self.test_views),
        };
        let view = SceneView {
            t_obj_base: Se3Pose::identity(),
            t_cam_base: views[plan.index].clone(),
            intrinsics: self.intrinsics.clone(),
            light_dir: default_light().into(),
        };
        let mut rng = seeds::rng(derive_seed(plan.seed, "domain", 0));
        let domain = self.config.domain.sample(&mut rng, derive_seed(plan.seed, "real", 0));
        let render = view.rasterize(mesh);
        if !render.mask.any() {
            return Err(Error::config("camera_distance", format!("pair {} renders no foreground", plan.id)));
        }
        let real = synthesize_real(&render, &domain, mesh, &view);
        let meta = PairMeta {
            id: plan.id.clone(),
            split: plan.split,
            mesh: mesh_name.clone(),
            seed: plan.seed,
            view,
            domain,
            defect: None,
        };
        let mut pair = ImagePair::normal(render, real, meta);
        if let Some(kind) = plan.kind {
            pair = self.with_defect(&pair, kind, mesh, plan)?;
        }
        pair.real = pair.real.quantized();
        pair.render = pair.render.quantized();
        Ok(pair)
    }

    fn with_defect(&self, pair: &ImagePair, kind: DefectKind, mesh: &TriMesh, plan: &PairPlan) -> Result<ImagePair> {
        let fg_area = pair.mask_w.count() as f64;
        let ranges = &self.config.defects;
        let mut last_err = None;
        for attempt in 0..MAX_DEFECT_ATTEMPTS {
            let mut rng = seeds::rng(derive_seed(plan.seed, "defect", attempt));
            let spec = match self.sample_defect(pair, kind, mesh, ranges, &mut rng) {
                Some(s) => s,
                None => continue,
            };
            match inject_defect(pair, &spec, mesh) {
                Ok(out) => {
                    let ratio = out.gt_defect_mask.count() as f64 / fg_area;
                    let s2 = spec.size_frac * spec.size_frac;
                    if ratio >= s2 / 4.0 && ratio <= 4.0 * s2 {
                        return Ok(out);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| {
            Error::DegenerateDefect(format!(
                "no admissible {} defect for pair {} after {MAX_DEFECT_ATTEMPTS} attempts",
                kind.name(),
                plan.id
            ))
        }))
    }

    fn sample_defect(
        &self,
        pair: &ImagePair,
        kind: DefectKind,
        mesh: &TriMesh,
        ranges: &DefectRanges,
        rng: &mut Rng,
    ) -> Option<DefectSpec> {
        let (w, h) = (pair.mask_w.width, pair.mask_w.height);
        let pick = |m: &Mask, rng: &mut Rng| -> Option<[f64; 2]> {
            let idx: Vec<usize> = (0..w * h).filter(|&i| m.data[i]).collect();
            if idx.is_empty() {
                return None;
            }
            let i = idx[rng.random_range(0..idx.len())];
            Some([((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64])
        };
        match kind {
            DefectKind::Texture | DefectKind::Structural => {
                let (x0, y0, x1, y1) = pair.mask_w.bbox()?;
                let r = ((x1 - x0).min(y1 - y0) / 20).max(1);
                let interior = pair.mask_w.erode(r);
                let location = pick(&interior, rng).or_else(|| pick(&pair.mask_w, rng))?;
                let magnitude = if kind == DefectKind::Texture {
                    uniform(rng, ranges.texture_magnitude)
                } else {
                    uniform(rng, ranges.structural_magnitude)
                };
                Some(DefectSpec {
                    kind,
                    location,
                    size_frac: uniform(rng, ranges.size_frac),
                    magnitude,
                    seed: rng.random(),
                    part: None,
                })
            }
            DefectKind::Logical => {
                let part = ranges.logical_parts[rng.random_range(0..ranges.logical_parts.len())].clone();
                let part_mesh = mesh.part_mesh(&part)?;
                let visible = pair.meta.view.mask(&part_mesh).and(&pair.mask_w);
                let location = pick(&visible, rng)?;
                let size_frac = (object_diagonal(&part_mesh) / object_diagonal(mesh)).clamp(1e-3, 0.5);
                Some(DefectSpec {
                    kind,
                    location,
                    size_frac,
                    magnitude: uniform(rng, ranges.logical_shift),
                    seed: rng.random(),
                    part: Some(part),
                })
            }
        }
    }

    /// All pairs of one split, generated in parallel.
    pub fn split(&self, split: Split) -> Result<Vec<ImagePair>> {
        self.plans
            .par_iter()
            .filter(|p| p.split == split)
            .map(|p| self.pair(p))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DefectKind>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub pairs: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.pairs.iter().filter(move |p| p.split == split).map(|p| p.id.as_str())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Writes the dataset under `root`; pairs are generated and written in
/// parallel, the manifest last.
pub fn generate_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    let gen = Generator::new(config)?;
    let entries: Vec<ManifestEntry> = gen
        .plans()
        .par_iter()
        .map(|plan| {
            let pair = gen.pair(plan)?;
            write_pair(&pair, &root.join(plan.split.name()).join(&plan.id))?;
            Ok(ManifestEntry {
                id: plan.id.clone(),
                split: plan.split,
                label: pair.label,
                kind: plan.kind,
                seed: plan.seed,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        version: 1,
        config: config.clone(),
        pairs: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(root, e))?;
    write_file(&root.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    label: Label,
    #[serde(flatten)]
    meta: PairMeta,
}

pub fn write_pair(pair: &ImagePair, dir: &Path) -> Result<()> {
    pair.real.write_pgm(&dir.join("real.pgm"))?;
    pair.render.write_pgm(&dir.join("render.pgm"))?;
    pair.mask_w.write_pbm(&dir.join("mask.pbm"))?;
    pair.gt_defect_mask.write_pbm(&dir.join("gt.pbm"))?;
    let meta = MetaFile {
        label: pair.label,
        meta: pair.meta.clone(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    write_file(&path, text.as_bytes())
}

pub fn read_pair(dir: &Path) -> Result<ImagePair> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let pair = ImagePair {
        real: ImageF32::read_pgm(&dir.join("real.pgm"))?,
        render: ImageF32::read_pgm(&dir.join("render.pgm"))?,
        mask_w: Mask::read_pbm(&dir.join("mask.pbm"))?,
        gt_defect_mask: Mask::read_pbm(&dir.join("gt.pbm"))?,
        label: meta.label,
        meta: meta.meta,
    };
    if !pair.real.same_shape(&pair.render)
        || !pair.mask_w.same_shape(&pair.gt_defect_mask)
        || pair.mask_w.width != pair.real.width
        || pair.mask_w.height != pair.real.height
    {
        return Err(Error::ShapeMismatch(format!("pair at {}", dir.display())));
    }
    Ok(pair)
}

/// Reads pair `id` of `split` from a dataset root.
pub fn load_pair(root: &Path, split: Split, id: &str) -> Result<ImagePair> {
    read_pair(&root.join(split.name()).join(id))
}

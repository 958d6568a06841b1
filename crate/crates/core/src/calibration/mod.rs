//! Real-to-twin feature calibration: dual projectors, single-head
//! cross-attention over the render dictionary, the two alignment losses,
//! hand-written gradients, training and zero-shot scoring.

mod backprop;
mod checkpoint;
mod train;

use ndarray::{Array1, Array2, NdFloat};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{builtin_tokens, patch_mask, PatchMask, PatchTokens};
use crate::image::{ImageF32, Mask};
use crate::seeds;

pub use checkpoint::{load_model, save_model};
pub use train::{
    read_loss_csv, train, write_loss_csv, AdamW, EpochLoss, Precision, TrainConfig, TrainOutcome,
};

/// Embedding width used with the built-in descriptor.
pub const BUILTIN_EMBED_DIM: usize = 32;

/// Two-layer perceptron `ramp(F W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T = f64> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: NdFloat> Projector<T> {
    pub fn zeros(dim_in: usize, d: usize) -> Self {
        Projector {
            w1: Array2::zeros((dim_in, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }

    /// Square projector that reduces to `ramp(F)`.
    pub fn identity(d: usize) -> Self {
        Projector {
            w1: Array2::eye(d),
            b1: Array1::zeros(d),
            w2: Array2::eye(d),
            b2: Array1::zeros(d),
        }
    }

    fn cast<U: NdFloat>(&self) -> Projector<U> {
        Projector {
            w1: cast2(&self.w1),
            b1: self.b1.mapv(|v| U::from(v).expect("finite")),
            w2: cast2(&self.w2),
            b2: self.b2.mapv(|v| U::from(v).expect("finite")),
        }
    }
}

fn cast2<T: NdFloat, U: NdFloat>(a: &Array2<T>) -> Array2<U> {
    a.mapv(|v| U::from(v).expect("finite"))
}

/// Calibration weights. A `None` projector is the fixed identity map
/// (first `min(dim_in, d)` channels copied, the rest zero), which is how
/// the projector ablations are expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel<T = f64> {
    pub dim_in: usize,
    pub d: usize,
    pub phi_r: Option<Projector<T>>,
    pub phi_s: Option<Projector<T>>,
    pub w_q: Array2<T>,
    pub w_e: Array2<T>,
    pub w_d: Array2<T>,
}

/// Gradients share the model's layout.
pub type Gradients = CalibrationModel<f64>;

/// Loss weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub local: f64,
    pub global: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            local: 1.0,
            global: 1.0,
        }
    }
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

impl<T: NdFloat> CalibrationModel<T> {
    pub fn zeros(dim_in: usize, d: usize, learned_phi_r: bool, learned_phi_s: bool) -> Self {
        CalibrationModel {
            dim_in,
            d,
            phi_r: learned_phi_r.then(|| Projector::zeros(dim_in, d)),
            phi_s: learned_phi_s.then(|| Projector::zeros(dim_in, d)),
            w_q: Array2::zeros((d, d)),
            w_e: Array2::zeros((d, d)),
            w_d: Array2::zeros((d, d)),
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    /// Parameter tensors in canonical order: φ_r (w1, b1, w2, b2), φ_s, W_q, W_e, W_d.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for p in [&self.phi_r, &self.phi_s].into_iter().flatten() {
            out.push(p.w1.as_slice().expect("standard layout"));
            out.push(p.b1.as_slice().expect("standard layout"));
            out.push(p.w2.as_slice().expect("standard layout"));
            out.push(p.b2.as_slice().expect("standard layout"));
        }
        for m in [&self.w_q, &self.w_e, &self.w_d] {
            out.push(m.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for p in [&mut self.phi_r, &mut self.phi_s].into_iter().flatten() {
            out.push(p.w1.as_slice_mut().expect("standard layout"));
            out.push(p.b1.as_slice_mut().expect("standard layout"));
            out.push(p.w2.as_slice_mut().expect("standard layout"));
            out.push(p.b2.as_slice_mut().expect("standard layout"));
        }
        for m in [&mut self.w_q, &mut self.w_e, &mut self.w_d] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
    }

    pub fn cast<U: NdFloat>(&self) -> CalibrationModel<U> {
        CalibrationModel {
            dim_in: self.dim_in,
            d: self.d,
            phi_r: self.phi_r.as_ref().map(Projector::cast),
            phi_s: self.phi_s.as_ref().map(Projector::cast),
            w_q: cast2(&self.w_q),
            w_e: cast2(&self.w_e),
            w_d: cast2(&self.w_d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl CalibrationModel<f64> {
    /// Seeded uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dim_in: usize, d: usize, learned_phi_r: bool, learned_phi_s: bool, seed: u64) -> Result<Self> {
        if dim_in == 0 || d == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let mut rng = seeds::rng(seeds::derive_seed(seed, "calibration-init", 0));
        let mut model = CalibrationModel::zeros(dim_in, d, learned_phi_r, learned_phi_s);
        let mut fill = |m: &mut Array2<f64>| {
            let (fan_in, fan_out) = m.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            m.mapv_inplace(|_| rng.random_range(-bound..=bound));
        };
        for p in [&mut model.phi_r, &mut model.phi_s].into_iter().flatten() {
            fill(&mut p.w1);
            fill(&mut p.w2);
        }
        fill(&mut model.w_q);
        fill(&mut model.w_e);
        fill(&mut model.w_d);
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        let bad = |what: &str| Err(Error::ShapeMismatch(format!("model {what}")));
        for p in [&self.phi_r, &self.phi_s].into_iter().flatten() {
            if p.w1.dim() != (self.dim_in, d) || p.b1.len() != d || p.w2.dim() != (d, d) || p.b2.len() != d {
                return bad("projector shapes");
            }
        }
        for m in [&self.w_q, &self.w_e, &self.w_d] {
            if m.dim() != (d, d) {
                return bad("attention map shapes");
            }
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument("model weights must be finite".into()));
        }
        Ok(())
    }
}

/// Patch tokens of one real/render pair plus the foreground patch mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTokens {
    pub id: String,
    pub real: PatchTokens,
    pub render: PatchTokens,
    pub mask: PatchMask,
    /// Whether the pair carries a defect (ground-truth mask non-empty).
    pub anomalous: bool,
}

impl PairTokens {
    pub fn new(id: impl Into<String>, real: PatchTokens, render: PatchTokens, mask: PatchMask, anomalous: bool) -> Result<Self> {
        let t = PairTokens {
            id: id.into(),
            real,
            render,
            mask,
            anomalous,
        };
        t.check()?;
        Ok(t)
    }

    /// Built-in descriptor tokens for a real/render image pair.
    pub fn from_images(
        id: impl Into<String>,
        real: &ImageF32,
        render: &ImageF32,
        mask_w: &Mask,
        anomalous: bool,
        patch: usize,
        threshold: f64,
    ) -> Result<Self> {
        let r = builtin_tokens(real, patch)?;
        let s = builtin_tokens(render, patch)?;
        let m = patch_mask(mask_w, patch, threshold)?;
        PairTokens::new(id, r, s, m, anomalous)
    }

    fn check(&self) -> Result<()> {
        if !self.real.same_grid(&self.render) || self.real.dim != self.render.dim {
            return Err(Error::ShapeMismatch(format!(
                "pair {}: real {}x{}x{} vs render {}x{}x{}",
                self.id, self.real.grid_h, self.real.grid_w, self.real.dim, self.render.grid_h, self.render.grid_w, self.render.dim
            )));
        }
        if self.mask.grid_h != self.real.grid_h || self.mask.grid_w != self.real.grid_w {
            return Err(Error::ShapeMismatch(format!("pair {}: mask grid differs from token grid", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }
}

pub(crate) fn tokens_to_array<T: NdFloat>(t: &PatchTokens) -> Array2<T> {
    Array2::from_shape_fn((t.len(), t.dim), |(i, j)| T::from(t.data[i * t.dim + j]).expect("finite"))
}

fn array_to_tokens(a: &Array2<f64>, grid_h: usize, grid_w: usize) -> Result<PatchTokens> {
    let data = a.iter().map(|&v| v as f32).collect();
    PatchTokens::new(grid_h, grid_w, a.ncols(), data)
}

fn check_input(f: &PatchTokens, model: &CalibrationModel) -> Result<()> {
    if f.dim != model.dim_in {
        return Err(Error::ShapeMismatch(format!("token dim {} but model expects {}", f.dim, model.dim_in)));
    }
    Ok(())
}

fn check_embedded(z: &PatchTokens, model: &CalibrationModel, what: &str) -> Result<()> {
    if z.dim != model.d {
        return Err(Error::ShapeMismatch(format!("{what} dim {} but model d is {}", z.dim, model.d)));
    }
    Ok(())
}

/// `Z_r = φ_r(F_r)`.
pub fn project_real(f_r: &PatchTokens, model: &CalibrationModel) -> Result<PatchTokens> {
    check_input(f_r, model)?;
    let z = backprop::project(&tokens_to_array::<f64>(f_r), model.phi_r.as_ref(), model.d);
    array_to_tokens(&z.z, f_r.grid_h, f_r.grid_w)
}

/// `Z_s = φ_s(F_s)`.
pub fn project_render(f_s: &PatchTokens, model: &CalibrationModel) -> Result<PatchTokens> {
    check_input(f_s, model)?;
    let z = backprop::project(&tokens_to_array::<f64>(f_s), model.phi_s.as_ref(), model.d);
    array_to_tokens(&z.z, f_s.grid_h, f_s.grid_w)
}

/// Row-softmax of `Q(Z_r) E(Z_s)ᵀ / sqrt(d)`.
pub fn affinity(z_r: &PatchTokens, z_s: &PatchTokens, model: &CalibrationModel) -> Result<Array2<f64>> {
    check_embedded(z_r, model, "Z_r")?;
    check_embedded(z_s, model, "Z_s")?;
    if z_r.len() != z_s.len() {
        return Err(Error::ShapeMismatch(format!("{} real tokens vs {} render tokens", z_r.len(), z_s.len())));
    }
    let q = tokens_to_array::<f64>(z_r).dot(&model.w_q);
    let k = tokens_to_array::<f64>(z_s).dot(&model.w_e);
    let mut s = q.dot(&k.t()) * model.scale();
    backprop::softmax_rows(&mut s);
    Ok(s)
}

/// `Ẑ_s = M D(Z_s)`.
pub fn reassemble(m: &Array2<f64>, z_s: &PatchTokens, model: &CalibrationModel) -> Result<PatchTokens> {
    check_embedded(z_s, model, "Z_s")?;
    if m.dim() != (z_s.len(), z_s.len()) {
        return Err(Error::ShapeMismatch(format!("affinity {:?} vs {} dictionary rows", m.dim(), z_s.len())));
    }
    let v = tokens_to_array::<f64>(z_s).dot(&model.w_d);
    array_to_tokens(&m.dot(&v), z_s.grid_h, z_s.grid_w)
}

fn same_layout(a: &PatchTokens, b: &PatchTokens) -> Result<()> {
    if !a.same_grid(b) || a.dim != b.dim {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.grid_h, a.grid_w, a.dim, b.grid_h, b.grid_w, b.dim
        )));
    }
    Ok(())
}

/// Cosine similarity with the zero-vector convention (0 similarity).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    backprop::cosine(ndarray::ArrayView1::from(a), ndarray::ArrayView1::from(b))
}

fn row64(t: &PatchTokens, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|&v| v as f64).collect()
}

/// Mask-weighted mean of `1 - cos(Z_r[p], Ẑ_s[p])`.
pub fn local_loss(z_r: &PatchTokens, z_hat: &PatchTokens, w: &PatchMask) -> Result<f64> {
    same_layout(z_r, z_hat)?;
    if w.len() != z_r.len() {
        return Err(Error::ShapeMismatch(format!("mask has {} cells, grid has {}", w.len(), z_r.len())));
    }
    let count = w.count();
    if count == 0 {
        return Err(Error::EmptyForegroundMask);
    }
    let sum: f64 = (0..z_r.len())
        .filter(|&p| w.bits[p])
        .map(|p| 1.0 - cosine(&row64(z_r, p), &row64(z_hat, p)))
        .sum();
    Ok(sum / count as f64)
}

fn gap(t: &PatchTokens) -> Vec<f64> {
    let mut g = vec![0.0; t.dim];
    for i in 0..t.len() {
        for (acc, &v) in g.iter_mut().zip(t.row(i)) {
            *acc += v as f64;
        }
    }
    let n = t.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}

/// `1 - cos(GAP(Ẑ_s), GAP(Z_s))`.
pub fn global_loss(z_hat: &PatchTokens, z_s: &PatchTokens) -> Result<f64> {
    same_layout(z_hat, z_s)?;
    if z_s.is_empty() {
        return Err(Error::ShapeMismatch("empty token grid".into()));
    }
    Ok(1.0 - cosine(&gap(z_hat), &gap(z_s)))
}

fn check_pair_model(pair: &PairTokens, model: &CalibrationModel) -> Result<()> {
    pair.check()?;
    check_input(&pair.real, model)?;
    model.validate()
}

/// Loss and exact analytic gradients of `λ_l L_local + λ_g L_global`, in f64.
pub fn forward_backward(pair: &PairTokens, model: &CalibrationModel, lambdas: Lambdas) -> Result<(LossParts, Gradients)> {
    check_pair_model(pair, model)?;
    forward_backward_t::<f64>(pair, model, lambdas)
}

/// Loss only, in f64.
pub fn loss(pair: &PairTokens, model: &CalibrationModel, lambdas: Lambdas) -> Result<LossParts> {
    check_pair_model(pair, model)?;
    if pair.mask.count() == 0 {
        return Err(Error::EmptyForegroundMask);
    }
    let fr = tokens_to_array::<f64>(&pair.real);
    let fs = tokens_to_array::<f64>(&pair.render);
    let fw = backprop::forward(&fr, &fs, model);
    let (local, global) = backprop::losses(&fw, &pair.mask.bits);
    Ok(LossParts {
        local,
        global,
        total: lambdas.local * local + lambdas.global * global,
    })
}

pub(crate) fn forward_backward_t<T: NdFloat>(
    pair: &PairTokens,
    model: &CalibrationModel<T>,
    lambdas: Lambdas,
) -> Result<(LossParts, Gradients)> {
    if pair.mask.count() == 0 {
        return Err(Error::EmptyForegroundMask);
    }
    let fr = tokens_to_array::<T>(&pair.real);
    let fs = tokens_to_array::<T>(&pair.render);
    let fw = backprop::forward(&fr, &fs, model);
    let (local, global) = backprop::losses(&fw, &pair.mask.bits);
    let lam_l = T::from(lambdas.local).expect("finite");
    let lam_g = T::from(lambdas.global).expect("finite");
    let grads = backprop::backward(&fr, &fs, &pair.mask.bits, model, &fw, lam_l, lam_g);
    let local = local.to_f64().expect("finite");
    let global = global.to_f64().expect("finite");
    Ok((
        LossParts {
            local,
            global,
            total: lambdas.local * local + lambdas.global * global,
        },
        grads.cast(),
    ))
}

/// Intermediate tensors of one inference pass, for inspection.
#[derive(Debug, Clone)]
pub struct Inference {
    pub z_r: Array2<f64>,
    pub z_s: Array2<f64>,
    pub v: Array2<f64>,
    pub affinity: Array2<f64>,
    pub z_hat: Array2<f64>,
}

pub fn infer(pair: &PairTokens, model: &CalibrationModel) -> Result<Inference> {
    check_pair_model(pair, model)?;
    let fr = tokens_to_array::<f64>(&pair.real);
    let fs = tokens_to_array::<f64>(&pair.render);
    let fw = backprop::forward(&fr, &fs, model);
    Ok(Inference {
        z_r: fw.zr.z,
        z_s: fw.zs.z,
        v: fw.v,
        affinity: fw.m,
        z_hat: fw.zhat,
    })
}

/// Grid-level anomaly scores `(1 - cos(Z_r[p], Ẑ_s[p])) W[p]`, row-major.
pub fn score_grid(pair: &PairTokens, model: &CalibrationModel) -> Result<Vec<f64>> {
    let inf = infer(pair, model)?;
    Ok(score_grid_from(&inf.z_r, &inf.z_hat, &pair.mask))
}

pub fn score_grid_from(z_r: &Array2<f64>, z_hat: &Array2<f64>, w: &PatchMask) -> Vec<f64> {
    (0..z_r.nrows())
        .map(|p| {
            if w.bits[p] {
                1.0 - backprop::cosine(z_r.row(p), z_hat.row(p))
            } else {
                0.0
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(grid: &[f64], grid_h: usize, grid_w: usize, out_h: usize, out_w: usize) -> ImageF32 {
    assert_eq!(grid.len(), grid_h * grid_w, "grid length");
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let ys = axis(grid_h, out_h);
    let xs = axis(grid_w, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let g = |y: usize, x: usize| grid[y * grid_w + x];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
            let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
            data.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    ImageF32 {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Full-resolution anomaly map; pixels outside `mask` (when given) are 0.
pub fn score_map(pair: &PairTokens, model: &CalibrationModel, out_h: usize, out_w: usize, mask: Option<&Mask>) -> Result<ImageF32> {
    let grid = score_grid(pair, model)?;
    let mut map = upsample_bilinear(&grid, pair.real.grid_h, pair.real.grid_w, out_h, out_w);
    if let Some(m) = mask {
        apply_mask(&mut map, m)?;
    }
    Ok(map)
}

pub(crate) fn apply_mask(map: &mut ImageF32, mask: &Mask) -> Result<()> {
    if mask.width != map.width || mask.height != map.height {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs map {}x{}",
            mask.width, mask.height, map.width, map.height
        )));
    }
    for (v, &b) in map.data.iter_mut().zip(&mask.data) {
        if !b {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Mean of the top `max(1, floor(0.001 · foreground))` pixel scores.
/// Without a mask every pixel counts as foreground.
pub fn image_score(map: &ImageF32, mask: Option<&Mask>) -> f64 {
    let fg = mask.map_or(map.data.len(), |m| m.data.iter().filter(|&&b| b).count());
    let k = ((fg as f64 * 0.001).floor() as usize).max(1).min(map.data.len().max(1));
    if map.data.is_empty() {
        return 0.0;
    }
    let mut vals: Vec<f32> = match mask {
        Some(m) if m.data.len() == map.data.len() && fg > 0 => {
            map.data.iter().zip(&m.data).filter(|(_, &b)| b).map(|(&v, _)| v).collect()
        }
        _ => map.data.clone(),
    };
    let k = k.min(vals.len());
    let nth = vals.len() - k;
    vals.select_nth_unstable_by(nth, |a, b| a.total_cmp(b));
    vals[nth..].iter().map(|&v| v as f64).sum::<f64>() / k as f64
}

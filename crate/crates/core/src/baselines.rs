//! Training-free residual baselines. Every map is zero outside `mask_w`.

use crate::error::{Error, Result};
use crate::image::{ImageF32, Mask};
use crate::scene::ImagePair;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check(real: &ImageF32, render: &ImageF32, mask: &Mask) -> Result<()> {
    if !real.same_shape(render) || mask.width != real.width || mask.height != real.height {
        return Err(Error::ShapeMismatch(format!(
            "real {}x{}, render {}x{}, mask {}x{}",
            real.width, real.height, render.width, render.height, mask.width, mask.height
        )));
    }
    Ok(())
}

fn masked(width: usize, height: usize, mask: &Mask, f: impl Fn(usize) -> f64) -> ImageF32 {
    let data = (0..width * height)
        .map(|i| if mask.data[i] { f(i).max(0.0) as f32 } else { 0.0 })
        .collect();
    ImageF32 { width, height, data }
}

/// Foreground mean and standard deviation (population).
fn fg_stats(img: &ImageF32, mask: &Mask) -> (f64, f64) {
    let vals: Vec<f64> = img.data.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    if vals.is_empty() {
        return (0.0, 1.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `|z(real) - z(render)|` where `z` standardizes by the foreground mean and std.
/// A constant foreground (zero std) is only centered.
pub fn rgb_residual_images(real: &ImageF32, render: &ImageF32, mask: &Mask) -> Result<ImageF32> {
    check(real, render, mask)?;
    let norm = |img: &ImageF32| {
        let (m, s) = fg_stats(img, mask);
        let s = if s > 1e-12 { s } else { 1.0 };
        move |v: f32| (v as f64 - m) / s
    };
    let (nr, ns) = (norm(real), norm(render));
    Ok(masked(real.width, real.height, mask, |i| (nr(real.data[i]) - ns(render.data[i])).abs()))
}

pub fn rgb_residual(pair: &ImagePair) -> Result<ImageF32> {
    rgb_residual_images(&pair.real, &pair.render, &pair.mask_w)
}

/// 3×3 Sobel response `(gx, gy)` with edge replication.
pub fn sobel(img: &ImageF32) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = |dx: isize, dy: isize| img.get_clamped(x as isize + dx, y as isize + dy) as f64;
            gx[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Magnitude of the difference of Sobel gradients, `|∇real - ∇render|`.
pub fn gradient_residual_images(real: &ImageF32, render: &ImageF32, mask: &Mask) -> Result<ImageF32> {
    check(real, render, mask)?;
    let (rx, ry) = sobel(real);
    let (sx, sy) = sobel(render);
    Ok(masked(real.width, real.height, mask, |i| (rx[i] - sx[i]).hypot(ry[i] - sy[i])))
}

pub fn gradient_residual(pair: &ImagePair) -> Result<ImageF32> {
    gradient_residual_images(&pair.real, &pair.render, &pair.mask_w)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
fn blur(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * src[y * w + clampi(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * tmp[clampi(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel SSIM with an 11×11 Gaussian window (σ = 1.5), edge-replicated borders.
pub fn ssim_index(a: &ImageF32, b: &ImageF32) -> Vec<f64> {
    let (w, h) = (a.width, a.height);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = blur(&x, w, h, &taps);
    let my = blur(&y, w, h, &taps);
    let mxx = blur(&prod(&x, &x), w, h, &taps);
    let myy = blur(&prod(&y, &y), w, h, &taps);
    let mxy = blur(&prod(&x, &y), w, h, &taps);
    (0..w * h)
        .map(|i| {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cxy = mxy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect()
}

/// `(1 - SSIM) / 2`, masked.
pub fn ssim_residual_images(real: &ImageF32, render: &ImageF32, mask: &Mask) -> Result<ImageF32> {
    check(real, render, mask)?;
    let s = ssim_index(real, render);
    Ok(masked(real.width, real.height, mask, |i| (1.0 - s[i]) / 2.0))
}

pub fn ssim_residual(pair: &ImagePair) -> Result<ImageF32> {
    ssim_residual_images(&pair.real, &pair.render, &pair.mask_w)
}

//! Dense patch tokens: a training-free handcrafted backbone, the `TTOK`
//! token-file format for externally computed features, and patch-level
//! foreground masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{write_file, ImageF32, Mask};

pub const BUILTIN_DIM: usize = 10;
pub const DEFAULT_PATCH: usize = 14;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// `grid_h × grid_w` grid of `dim`-dimensional tokens, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl PatchTokens {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid_h * grid_w * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {grid_h}x{grid_w}x{dim} tokens",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("token value {i} is not finite")));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    /// Number of tokens `N`.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn same_grid(&self, other: &PatchTokens) -> bool {
        self.grid_h == other.grid_h && self.grid_w == other.grid_w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len() + 8);
        out.extend_from_slice(TTOK_MAGIC);
        for v in [TTOK_VERSION, self.grid_h as u32, self.grid_w as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = fnv1a64(&out[start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let field = |offset: usize, len: usize, what: &str| -> Result<&[u8]> {
            bytes.get(offset..offset + len).ok_or_else(|| Error::Format {
                offset,
                reason: format!("truncated {what}"),
            })
        };
        if field(0, 4, "magic")? != TTOK_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected TTOK".into(),
            });
        }
        let u32_at = |offset: usize, what: &str| -> Result<u32> {
            Ok(u32::from_le_bytes(field(offset, 4, what)?.try_into().expect("4 bytes")))
        };
        let version = u32_at(4, "version")?;
        if version != TTOK_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let grid_h = u32_at(8, "grid_h")? as usize;
        let grid_w = u32_at(12, "grid_w")? as usize;
        let dim = u32_at(16, "dim")? as usize;
        let n = grid_h
            .checked_mul(grid_w)
            .and_then(|v| v.checked_mul(dim))
            .ok_or(Error::Format {
                offset: 8,
                reason: "declared size overflows".into(),
            })?;
        let start = 20;
        let payload_len = n.checked_mul(4).ok_or(Error::Format {
            offset: 8,
            reason: "declared size overflows".into(),
        })?;
        let available = bytes.len().saturating_sub(start);
        if available < payload_len {
            return Err(Error::Format {
                offset: start + available / 4 * 4,
                reason: format!("truncated payload, expected {n} f32 values"),
            });
        }
        let payload = &bytes[start..start + payload_len];
        let end = start + payload_len;
        let stored = u64::from_le_bytes(field(end, 8, "checksum")?.try_into().expect("8 bytes"));
        if bytes.len() != end + 8 {
            return Err(Error::Format {
                offset: end + 8,
                reason: format!("{} trailing bytes", bytes.len() - end - 8),
            });
        }
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut data = Vec::with_capacity(n);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: start + 4 * i,
                    reason: "non-finite value".into(),
                });
            }
            data.push(v);
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }
}

const TTOK_MAGIC: &[u8; 4] = b"TTOK";
const TTOK_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_tokens(tokens: &PatchTokens, path: &Path) -> Result<()> {
    write_file(path, &tokens.to_bytes())
}

pub fn load_tokens(path: &Path) -> Result<PatchTokens> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PatchTokens::from_bytes(&bytes)
}

fn check_divisible(w: usize, h: usize, patch: usize) -> Result<()> {
    if patch == 0 || w % patch != 0 || h % patch != 0 || w == 0 || h == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{w}x{h} image is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

/// Built-in backbone: one 10-dim descriptor per non-overlapping patch.
///
/// Layout: mean, std, 4 gradient-orientation bins, fine and coarse Laplacian
/// RMS, min, max. Gradients are forward differences inside the patch,
/// binned by unsigned orientation over `[0, π)` and weighted by magnitude,
/// averaged over the patch. The coarse band uses the 2×2-averaged patch.
pub fn extract_tokens(image: &ImageF32, patch: usize) -> Result<PatchTokens> {
    let (w, h) = (image.width, image.height);
    check_divisible(w, h, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(gh * gw * BUILTIN_DIM);
    let mut buf = vec![0f64; patch * patch];
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    buf[y * patch + x] = image.get(gx * patch + x, gy * patch + y) as f64;
                }
            }
            data.extend(describe(&buf, patch).iter().map(|&v| v as f32));
        }
    }
    PatchTokens::new(gh, gw, BUILTIN_DIM, data)
}

fn describe(p: &[f64], n: usize) -> [f64; BUILTIN_DIM] {
    let count = (n * n) as f64;
    let mean = p.iter().sum::<f64>() / count;
    let std = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut hist = [0.0; 4];
    if n >= 2 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let gx = p[y * n + x + 1] - p[y * n + x];
                let gy = p[(y + 1) * n + x] - p[y * n + x];
                let mag = gx.hypot(gy);
                if mag > 0.0 {
                    let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    let bin = ((theta / (std::f64::consts::PI / 4.0)) as usize).min(3);
                    hist[bin] += mag;
                }
            }
        }
        let norm = ((n - 1) * (n - 1)) as f64;
        for b in &mut hist {
            *b /= norm;
        }
    }

    let fine = laplacian_rms(p, n);
    let m = n / 2;
    let coarse = if m >= 3 {
        let mut down = vec![0.0; m * m];
        for y in 0..m {
            for x in 0..m {
                down[y * m + x] = (p[2 * y * n + 2 * x]
                    + p[2 * y * n + 2 * x + 1]
                    + p[(2 * y + 1) * n + 2 * x]
                    + p[(2 * y + 1) * n + 2 * x + 1])
                    / 4.0;
            }
        }
        laplacian_rms(&down, m)
    } else {
        0.0
    };
    [mean, std, hist[0], hist[1], hist[2], hist[3], fine, coarse, min, max]
}

/// RMS of the 4-neighbour Laplacian over interior pixels.
fn laplacian_rms(p: &[f64], n: usize) -> f64 {
    if n < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            let l = p[(y - 1) * n + x] + p[(y + 1) * n + x] + p[y * n + x - 1] + p[y * n + x + 1] - 4.0 * p[y * n + x];
            sum += l * l;
        }
    }
    (sum / ((n - 2) * (n - 2)) as f64).sqrt()
}

/// Per-channel centre and spread of raw built-in descriptors, measured once
/// on the default training split and then frozen.
pub const BUILTIN_CENTER: [f32; BUILTIN_DIM] = [0.147, 0.029, 0.004, 0.003, 0.003, 0.001, 0.044, 0.037, 0.101, 0.194];
pub const BUILTIN_SPREAD: [f32; BUILTIN_DIM] = [0.251, 0.072, 0.009, 0.008, 0.008, 0.003, 0.099, 0.093, 0.212, 0.304];
/// Gain applied after standardization. Unit-variance tokens leave the scaled
/// dot-product attention almost uniform at initialization, and training
/// then settles on blurred reassemblies.
pub const BUILTIN_GAIN: f32 = 4.0;

/// `gain * (v - center) / spread` per channel, in place.
pub fn standardize_builtin(tokens: &mut PatchTokens) -> Result<()> {
    if tokens.dim != BUILTIN_DIM {
        return Err(Error::DimensionMismatch(format!(
            "built-in standardization expects dim {BUILTIN_DIM}, got {}",
            tokens.dim
        )));
    }
    for row in tokens.data.chunks_exact_mut(BUILTIN_DIM) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = BUILTIN_GAIN * (*v - BUILTIN_CENTER[j]) / BUILTIN_SPREAD[j];
        }
    }
    Ok(())
}

/// Tokens as the calibration model sees them from the built-in backbone:
/// [`extract_tokens`] followed by [`standardize_builtin`].
pub fn builtin_tokens(image: &ImageF32, patch: usize) -> Result<PatchTokens> {
    let mut t = extract_tokens(image, patch)?;
    standardize_builtin(&mut t)?;
    Ok(t)
}

/// Patch-level foreground gate on the token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

impl PatchMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn filled(grid_h: usize, grid_w: usize, value: bool) -> Self {
        Self {
            grid_h,
            grid_w,
            bits: vec![value; grid_h * grid_w],
        }
    }
}

/// Bit is set iff the patch's foreground fraction is at least `threshold_frac`.
pub fn patch_mask(mask: &Mask, patch: usize, threshold_frac: f64) -> Result<PatchMask> {
    check_divisible(mask.width, mask.height, patch)?;
    if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold_frac must lie in (0, 1], got {threshold_frac}"
        )));
    }
    let (gh, gw) = (mask.height / patch, mask.width / patch);
    let need = threshold_frac * (patch * patch) as f64;
    let mut bits = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut c = 0usize;
            for y in 0..patch {
                for x in 0..patch {
                    c += mask.get(gx * patch + x, gy * patch + y) as usize;
                }
            }
            bits.push(c as f64 >= need);
        }
    }
    Ok(PatchMask {
        grid_h: gh,
        grid_w: gw,
        bits,
    })
}

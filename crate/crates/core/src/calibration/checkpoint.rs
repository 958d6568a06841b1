//! `CALM` model checkpoints.
//!
//! Layout (little-endian): magic `CALM`, u32 version, u32 d, u32 dim_in,
//! u32 flags (bit 0: learned φ_r, bit 1: learned φ_s), then every parameter
//! tensor in canonical order as f64, then u64 FNV-1a of the tensor bytes.

use std::path::Path;

use super::CalibrationModel;
use crate::error::{Error, Result};
use crate::features::fnv1a64;

const MAGIC: &[u8; 4] = b"CALM";
const VERSION: u32 = 1;
const HEADER: usize = 20;

impl CalibrationModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.param_count() + 8);
        out.extend_from_slice(MAGIC);
        let flags = self.phi_r.is_some() as u32 | (self.phi_s.is_some() as u32) << 1;
        for v in [VERSION, self.d as u32, self.dim_in as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a64(&out[HEADER..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format { offset, reason };
        let u32_at = |offset: usize, what: &str| -> Result<u32> {
            bytes
                .get(offset..offset + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| fmt(offset, format!("truncated {what}")))
        };
        match bytes.get(0..4) {
            Some(m) if m == MAGIC => {}
            Some(_) => return Err(fmt(0, "bad magic, expected CALM".into())),
            None => return Err(fmt(0, "truncated magic".into())),
        }
        let version = u32_at(4, "version")?;
        if version != VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let d = u32_at(8, "d")? as usize;
        let dim_in = u32_at(12, "dim_in")? as usize;
        let flags = u32_at(16, "flags")?;
        if d == 0 || dim_in == 0 {
            return Err(fmt(8, "zero model dimension".into()));
        }
        if flags > 3 {
            return Err(fmt(16, format!("unknown flags {flags:#x}")));
        }
        let mut model = CalibrationModel::<f64>::zeros(dim_in, d, flags & 1 != 0, flags & 2 != 0);
        let n = model.param_count();
        let end = HEADER + 8 * n;
        if bytes.len() < end {
            let avail = bytes.len().saturating_sub(HEADER);
            return Err(fmt(HEADER + avail / 8 * 8, format!("truncated weights, expected {n} f64 values")));
        }
        if bytes.len() < end + 8 {
            return Err(fmt(end, "truncated checksum".into()));
        }
        if bytes.len() > end + 8 {
            return Err(fmt(end + 8, format!("{} trailing bytes", bytes.len() - end - 8)));
        }
        let stored = u64::from_le_bytes(bytes[end..end + 8].try_into().expect("8 bytes"));
        let computed = fnv1a64(&bytes[HEADER..end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut flat = Vec::with_capacity(n);
        for (i, c) in bytes[HEADER..end].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(fmt(HEADER + 8 * i, "non-finite weight".into()));
            }
            flat.push(v);
        }
        model.set_flat_params(&flat);
        Ok(model)
    }
}

pub fn save_model(model: &CalibrationModel, path: &Path) -> Result<()> {
    crate::image::write_file(path, &model.to_bytes())
}

pub fn load_model(path: &Path) -> Result<CalibrationModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CalibrationModel::from_bytes(&bytes)
}

//! Grayscale images, binary masks and their netpbm encodings.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel `f32` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel value with coordinates clamped to the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn same_shape(&self, other: &ImageF32) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rounds to the 8-bit grid used by PGM storage.
    pub fn quantized(&self) -> ImageF32 {
        ImageF32 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = parse_header(bytes, b"P5", 3)?;
        let (width, height, maxval) = (header[0], header[1], header[2]);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format {
                offset,
                reason: format!("unsupported maxval {maxval}"),
            });
        }
        let payload = &bytes[offset..];
        if payload.len() < width * height {
            return Err(Error::Format {
                offset: bytes.len(),
                reason: format!("expected {} pixel bytes", width * height),
            });
        }
        let data = payload[..width * height]
            .iter()
            .map(|&b| b as f32 / maxval as f32)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm_bytes())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes)
    }

    /// Values linearly mapped from `[lo, hi]` onto `[0, 1]` (used for visualising score maps).
    pub fn normalized(&self, lo: f32, hi: f32) -> ImageF32 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        ImageF32 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn xor(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a != b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_shape(other), "mask shapes differ");
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Morphological dilation with a `(2r+1)²` square element.
    pub fn dilate(&self, r: usize) -> Mask {
        let (w, h) = (self.width, self.height);
        let mut tmp = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                tmp.set(x, y, (x0..=x1).any(|xx| self.get(xx, y)));
            }
        }
        let mut out = Mask::new(w, h);
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for x in 0..w {
                out.set(x, y, (y0..=y1).any(|yy| tmp.get(x, yy)));
            }
        }
        out
    }

    pub fn erode(&self, r: usize) -> Mask {
        let inv = Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        };
        let d = inv.dilate(r);
        Mask {
            width: self.width,
            height: self.height,
            data: d.data.iter().map(|b| !b).collect(),
        }
    }

    /// Bounding box `(x0, y0, x1, y1)` inclusive, or `None` when empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// 8-connected component labels (0 = background, 1..=n) and `n`.
    pub fn components(&self) -> (Vec<u32>, usize) {
        let (w, h) = (self.width, self.height);
        let mut labels = vec![0u32; w * h];
        let mut n = 0u32;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !self.data[start] || labels[start] != 0 {
                continue;
            }
            n += 1;
            labels[start] = n;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if self.data[j] && labels[j] == 0 {
                            labels[j] = n;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        (labels, n as usize)
    }

    /// Largest 8-connected component (first in raster order on ties).
    pub fn largest_component(&self) -> Mask {
        let (labels, n) = self.components();
        let mut sizes = vec![0usize; n + 1];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        let best = (1..=n).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap_or(0);
        Mask {
            width: self.width,
            height: self.height,
            data: labels.iter().map(|&l| best != 0 && l as usize == best).collect(),
        }
    }

    pub fn to_image(&self) -> ImageF32 {
        ImageF32 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Binary PBM (`P4`), 1 = foreground, rows padded to whole bytes.
    pub fn to_pbm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = self.width.div_ceil(8);
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.get(x, y) {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_pbm_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = parse_header(bytes, b"P4", 2)?;
        let (width, height) = (header[0], header[1]);
        let row_bytes = width.div_ceil(8);
        let payload = &bytes[offset..];
        if payload.len() < row_bytes * height {
            return Err(Error::Format {
                offset: bytes.len(),
                reason: format!("expected {} mask bytes", row_bytes * height),
            });
        }
        let mut mask = Mask::new(width, height);
        for y in 0..height {
            let row = &payload[y * row_bytes..(y + 1) * row_bytes];
            for x in 0..width {
                mask.set(x, y, row[x / 8] & (0x80 >> (x % 8)) != 0);
            }
        }
        Ok(mask)
    }

    pub fn write_pbm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pbm_bytes())
    }

    pub fn read_pbm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pbm_bytes(&bytes)
    }
}

/// Parses a netpbm header with `fields` integers and returns them together
/// with the offset of the first payload byte.
fn parse_header(bytes: &[u8], magic: &[u8; 2], fields: usize) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format {
            offset: 0,
            reason: format!("expected magic {}", String::from_utf8_lossy(magic)),
        });
    }
    let mut pos = 2;
    let mut values = Vec::with_capacity(fields);
    while values.len() < fields {
        // whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                reason: "expected an integer header field".into(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        values.push(text.parse().map_err(|_| Error::Format {
            offset: start,
            reason: "header field out of range".into(),
        })?);
    }
    // exactly one whitespace byte separates header and payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format {
            offset: pos,
            reason: "missing whitespace after header".into(),
        });
    }
    Ok((values, pos + 1))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_on_quantized_values() {
        let img = ImageF32::from_fn(7, 5, |x, y| ((x * 31 + y * 17) % 256) as f32 / 255.0);
        let back = ImageF32::from_pgm_bytes(&img.to_pgm_bytes()).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn pbm_roundtrip_with_row_padding() {
        let m = Mask::from_fn(13, 3, |x, y| (x + y) % 3 == 0);
        let bytes = m.to_pbm_bytes();
        assert_eq!(Mask::from_pbm_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let img = ImageF32::new(4, 4);
        let bytes = img.to_pgm_bytes();
        assert!(matches!(
            ImageF32::from_pgm_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(ImageF32::from_pgm_bytes(b"P6\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = ImageF32::from_pgm_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn dilate_and_erode() {
        let mut m = Mask::new(9, 9);
        m.set(4, 4, true);
        let d = m.dilate(1);
        assert_eq!(d.count(), 9);
        assert_eq!(d.erode(1), m);
        assert_eq!(d.bbox(), Some((3, 3, 5, 5)));
    }

    #[test]
    fn components_use_eight_connectivity() {
        let m = Mask::from_fn(6, 4, |x, y| (x == y && x < 3) || (x == 5 && y == 0) || (x == 5 && y == 3));
        let (labels, n) = m.components();
        assert_eq!(n, 3);
        assert_eq!(labels[0], labels[7]);
        assert_eq!(labels[7], labels[14]);
        assert_eq!(m.largest_component().count(), 3);
        assert_eq!(Mask::new(3, 3).largest_component().count(), 0);
    }
}

//! Brute-force references shared by the metric tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspect::image::{ImageF32, Mask};

pub fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Precision/recall at every distinct threshold, descending.
pub fn pr_points(s: &[f64], l: &[bool]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = s.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pos = l.iter().filter(|&&x| x).count() as f64;
    ts.iter()
        .map(|&t| {
            let tp = (0..s.len()).filter(|&i| s[i] >= t && l[i]).count() as f64;
            let pp = (0..s.len()).filter(|&i| s[i] >= t).count() as f64;
            (tp / pp, tp / pos)
        })
        .collect()
}

pub fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (p, r) in pr_points(s, l) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

pub fn brute_f1(s: &[f64], l: &[bool]) -> f64 {
    pr_points(s, l)
        .into_iter()
        .map(|(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .fold(0.0, f64::max)
}

/// 8-connected regions by breadth-first flood fill.
pub fn regions(gt: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (gt.width as isize, gt.height as isize);
    let mut seen = vec![false; gt.data.len()];
    let mut out = Vec::new();
    for start in 0..gt.data.len() {
        if !gt.data[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            region.push(i);
            let (x, y) = ((i as isize) % w, (i as isize) / w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if gt.data[j] && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
        out.push(region);
    }
    out
}

/// Exact PRO curve over every distinct threshold, integrated to `limit`.
pub fn brute_aupro(maps: &[ImageF32], gts: &[Mask], limit: f64) -> f64 {
    let regs: Vec<Vec<Vec<usize>>> = gts.iter().map(regions).collect();
    let mut ts: Vec<f32> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    ts.sort_by(|a, b| a.total_cmp(b));
    ts.dedup();
    let negatives: usize = gts.iter().map(|g| g.data.iter().filter(|&&b| !b).count()).sum();
    let n_regions: usize = regs.iter().map(|r| r.len()).sum();
    let mut pts = vec![(0.0f64, 0.0f64)];
    for &t in &ts {
        let mut fp = 0usize;
        let mut pro = 0.0;
        for (k, m) in maps.iter().enumerate() {
            fp += (0..m.data.len()).filter(|&i| !gts[k].data[i] && m.data[i] >= t).count();
            for r in &regs[k] {
                pro += r.iter().filter(|&&i| m.data[i] >= t).count() as f64 / r.len() as f64;
            }
        }
        pts.push((fp as f64 / negatives as f64, pro / n_regions as f64));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        let x1c = x1.min(limit);
        let y1c = if x1 > limit { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y1 };
        area += (x1c - x0) * (y0 + y1c) / 2.0;
    }
    area / limit
}

pub fn random_instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=64);
    // coarse scores so ties are common
    let levels = rng.random_range(2..12);
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    l[0] = true;
    l[1] = false;
    if rng.random_bool(0.3) {
        s.iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
    }
    (s, l)
}

pub fn toy_maps(seed: u64) -> (Vec<ImageF32>, Vec<Mask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..=2);
    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for k in 0..images {
        let gt = Mask::from_fn(8, 8, |x, y| {
            // two blobs, the second sometimes missing
            (x < 3 && y < 3) || (k == 0 && x >= 5 && y >= 4 && x + y < 13)
        });
        let levels = rng.random_range(3..20);
        let map = ImageF32::from_fn(8, 8, |x, y| {
            let base = if gt.get(x, y) { 0.3 } else { 0.0 };
            base + rng.random_range(0..levels) as f32 / levels as f32
        });
        maps.push(map);
        gts.push(gt);
    }
    (maps, gts)
}


use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspect::calibration::*;
use twinspect::features::{PatchMask, PatchTokens};
use twinspect::image::{ImageF32, Mask};
use twinspect::scene::{DatasetConfig, Generator, Split};
use twinspect::Error;

fn rand_tokens(rng: &mut ChaCha8Rng, h: usize, w: usize, dim: usize) -> PatchTokens {
    let data = (0..h * w * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    PatchTokens::new(h, w, dim, data).unwrap()
}

fn rand_pair(seed: u64, h: usize, w: usize, dim: usize) -> PairTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = rand_tokens(&mut rng, h, w, dim);
    let render = rand_tokens(&mut rng, h, w, dim);
    let mut bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
    bits[0] = true;
    let mask = PatchMask { grid_h: h, grid_w: w, bits };
    PairTokens::new(format!("rand{seed}"), real, render, mask, false).unwrap()
}

/// Random model with non-zero biases so every code path is exercised.
fn rand_model(seed: u64, dim_in: usize, d: usize) -> CalibrationModel {
    let mut m = CalibrationModel::init(dim_in, d, true, true, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in [&mut m.phi_r, &mut m.phi_s].into_iter().flatten() {
        p.b1.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        p.b2.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    m
}

fn to_rows(t: &PatchTokens) -> Vec<Vec<f64>> {
    (0..t.len()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

// naive reference implementations ------------------------------------------

fn naive_matmul(a: &[Vec<f64>], b: &Array2<f64>) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b.ncols())
                .map(|j| (0..row.len()).map(|k| row[k] * b[[k, j]]).sum())
                .collect()
        })
        .collect()
}

fn naive_project(f: &[Vec<f64>], p: &Projector) -> Vec<Vec<f64>> {
    let mut h = naive_matmul(f, &p.w1);
    for row in &mut h {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v + p.b1[j]).max(0.0);
        }
    }
    let mut z = naive_matmul(&h, &p.w2);
    for row in &mut z {
        for (j, v) in row.iter_mut().enumerate() {
            *v += p.b2[j];
        }
    }
    z
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// projectors ----------------------------------------------------------------

#[test]
fn projection_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = rand_tokens(&mut rng, 4, 5, 7);
    let m = rand_model(2, 7, 9);
    let z = project_real(&f, &m).unwrap();
    let want = naive_project(&to_rows(&f), m.phi_r.as_ref().unwrap());
    assert_eq!((z.grid_h, z.grid_w, z.dim), (4, 5, 9));
    for (i, row) in want.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert!((z.row(i)[j] as f64 - v).abs() < 1e-6);
        }
    }
    let zs = project_render(&f, &m).unwrap();
    let want = naive_project(&to_rows(&f), m.phi_s.as_ref().unwrap());
    assert!((zs.row(3)[2] as f64 - want[3][2]).abs() < 1e-6);
}

#[test]
fn zero_weights_project_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = rand_tokens(&mut rng, 3, 3, 4);
    let m = CalibrationModel::<f64>::zeros(4, 6, true, true);
    assert!(project_real(&f, &m).unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn identity_projector_pads_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = rand_tokens(&mut rng, 2, 2, 3);
    let m = CalibrationModel::<f64>::zeros(3, 5, false, false);
    let z = project_real(&f, &m).unwrap();
    for i in 0..4 {
        assert_eq!(&z.row(i)[..3], f.row(i));
        assert_eq!(&z.row(i)[3..], &[0.0, 0.0]);
    }
}

// affinity and reassembly ---------------------------------------------------

fn eye_model(d: usize) -> CalibrationModel {
    let mut m = CalibrationModel::<f64>::zeros(d, d, false, false);
    m.w_q = Array2::eye(d);
    m.w_e = Array2::eye(d);
    m.w_d = Array2::eye(d);
    m
}

#[test]
fn affinity_four_tokens_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zr = rand_tokens(&mut rng, 2, 2, 3);
    let zs = rand_tokens(&mut rng, 2, 2, 3);
    let mut m = rand_model(6, 3, 3);
    m.phi_r = None;
    m.phi_s = None;
    let a = affinity(&zr, &zs, &m).unwrap();
    let q = naive_matmul(&to_rows(&zr), &m.w_q);
    let k = naive_matmul(&to_rows(&zs), &m.w_e);
    for i in 0..4 {
        let logits: Vec<f64> = (0..4)
            .map(|j| (0..3).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 3f64.sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..4 {
            assert!((a[[i, j]] - logits[j].exp() / z).abs() < 1e-9);
        }
    }
}

#[test]
fn affinity_saturates_on_dominant_token() {
    let d = 4;
    let m = eye_model(d);
    let mut last = 0.0;
    for norm in [1.0f32, 3.0, 6.0, 12.0] {
        // token i shares direction e_i; all others orthogonal to each other
        let mut data = vec![0.0f32; 4 * d];
        for i in 0..4 {
            data[i * d + i] = norm;
        }
        let z = PatchTokens::new(2, 2, d, data).unwrap();
        let a = affinity(&z, &z, &m).unwrap();
        assert!(a[[1, 1]] > last);
        last = a[[1, 1]];
    }
    assert!(last > 1.0 - 1e-12);
}

#[test]
fn affinity_rejects_mismatched_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tokens(&mut rng, 2, 2, 3);
    let b = rand_tokens(&mut rng, 2, 3, 3);
    assert!(matches!(affinity(&a, &b, &eye_model(3)), Err(Error::ShapeMismatch(_))));
    let c = rand_tokens(&mut rng, 2, 2, 4);
    assert!(matches!(affinity(&a, &c, &eye_model(3)), Err(Error::ShapeMismatch(_))));
}

#[test]
fn reassemble_identity_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let zs = rand_tokens(&mut rng, 2, 3, 4);
    let m = eye_model(4);
    let out = reassemble(&Array2::eye(6), &zs, &m).unwrap();
    assert_eq!(out, zs);
    let uni = Array2::from_elem((6, 6), 1.0 / 6.0);
    let out = reassemble(&uni, &zs, &m).unwrap();
    let rows = to_rows(&zs);
    for c in 0..4 {
        let mean: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / 6.0;
        for i in 0..6 {
            assert!((out.row(i)[c] as f64 - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn reassemble_matches_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let zs = rand_tokens(&mut rng, 3, 3, 5);
    let m = rand_model(10, 5, 5);
    let mut a = Array2::from_shape_fn((9, 9), |_| rng.random_range(0.0..1.0));
    for mut row in a.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let out = reassemble(&a, &zs, &m).unwrap();
    let v = naive_matmul(&to_rows(&zs), &m.w_d);
    for i in 0..9 {
        for c in 0..5 {
            let want: f64 = (0..9).map(|j| a[[i, j]] * v[j][c]).sum();
            assert!((out.row(i)[c] as f64 - want).abs() < 1e-6);
        }
    }
}

// losses --------------------------------------------------------------------

#[test]
fn local_loss_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = rand_tokens(&mut rng, 3, 3, 4);
    let w = PatchMask::filled(3, 3, true);
    assert_abs_diff_eq!(local_loss(&z, &z, &w).unwrap(), 0.0, epsilon = 1e-12);
    let mut neg = z.clone();
    neg.data.iter_mut().for_each(|v| *v = -*v);
    assert_abs_diff_eq!(local_loss(&z, &neg, &w).unwrap(), 2.0, epsilon = 1e-12);
}

#[test]
fn local_loss_matches_per_patch_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tokens(&mut rng, 4, 4, 6);
    let b = rand_tokens(&mut rng, 4, 4, 6);
    let bits: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
    let w = PatchMask { grid_h: 4, grid_w: 4, bits: bits.clone() };
    let (ra, rb) = (to_rows(&a), to_rows(&b));
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..16 {
        let wp = bits[p] as u8 as f64;
        num += (1.0 - naive_cos(&ra[p], &rb[p])) * wp;
        den += wp;
    }
    assert!((local_loss(&a, &b, &w).unwrap() - num / den).abs() < 1e-9);
}

#[test]
fn local_loss_counts_zero_rows_as_dissimilar() {
    let z = PatchTokens::new(1, 2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let w = PatchMask::filled(1, 2, true);
    assert_abs_diff_eq!(local_loss(&z, &z, &w).unwrap(), 0.5, epsilon = 1e-15);
}

#[test]
fn global_loss_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = rand_tokens(&mut rng, 3, 4, 5);
    assert_abs_diff_eq!(global_loss(&z, &z).unwrap(), 0.0, epsilon = 1e-12);
    let mut z3 = z.clone();
    z3.data.iter_mut().for_each(|v| *v *= 3.0);
    assert_abs_diff_eq!(global_loss(&z3, &z).unwrap(), 0.0, epsilon = 1e-6);
    let other = rand_tokens(&mut rng, 3, 4, 5);
    let gap = |t: &PatchTokens| {
        let r = to_rows(t);
        (0..5).map(|c| r.iter().map(|row| row[c]).sum::<f64>() / 12.0).collect::<Vec<_>>()
    };
    let want = 1.0 - naive_cos(&gap(&other), &gap(&z));
    assert!((global_loss(&other, &z).unwrap() - want).abs() < 1e-9);
}

// gradients -----------------------------------------------------------------

fn fd_check(pair: &PairTokens, model: &CalibrationModel, lambdas: Lambdas, picks: usize, seed: u64) -> f64 {
    let (_, grads) = forward_backward(pair, model, lambdas).unwrap();
    let g = grads.flat_params();
    let base = model.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let i = rng.random_range(0..base.len());
        let mut m = model.clone();
        let mut p = base.clone();
        p[i] = base[i] + h;
        m.set_flat_params(&p);
        let up = loss(pair, &m, lambdas).unwrap().total;
        p[i] = base[i] - h;
        m.set_flat_params(&p);
        let down = loss(pair, &m, lambdas).unwrap().total;
        let numeric = (up - down) / (2.0 * h);
        // relative error, floored so weights with vanishing gradients compare absolutely
        let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        let pair = rand_pair(100 + seed, 3, 4, 5);
        let model = rand_model(200 + seed, 5, 6);
        let worst = fd_check(&pair, &model, Lambdas::default(), 20, seed);
        assert!(worst < 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}

#[test]
fn gradients_match_with_identity_projectors_and_uneven_lambdas() {
    let pair = rand_pair(7, 3, 3, 4);
    let mut model = rand_model(8, 4, 6);
    model.phi_r = None;
    let lambdas = Lambdas { local: 0.7, global: 2.5 };
    assert!(fd_check(&pair, &model, lambdas, 20, 1) < 1e-4);
    model.phi_s = None;
    assert!(fd_check(&pair, &model, lambdas, 20, 2) < 1e-4);
}

#[test]
fn zero_lambdas_give_zero_gradients() {
    let pair = rand_pair(3, 3, 3, 4);
    let model = rand_model(4, 4, 5);
    let (lp, g) = forward_backward(&pair, &model, Lambdas { local: 0.0, global: 0.0 }).unwrap();
    assert_eq!(lp.total, 0.0);
    assert!(g.flat_params().iter().all(|&v| v == 0.0));
}

#[test]
fn weights_reading_only_masked_out_patches_get_no_gradient() {
    // channel 0 of the real tokens is non-zero only where the mask is off
    let mut pair = rand_pair(21, 4, 4, 5);
    for p in 0..16 {
        if pair.mask.bits[p] {
            pair.real.data[p * 5] = 0.0;
        }
    }
    let model = rand_model(22, 5, 6);
    let (_, g) = forward_backward(&pair, &model, Lambdas { local: 1.0, global: 0.0 }).unwrap();
    let w1 = &g.phi_r.as_ref().unwrap().w1;
    assert!(w1.row(0).iter().all(|&v| v == 0.0));
    assert!(w1.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn empty_patch_mask_is_rejected() {
    let mut pair = rand_pair(1, 2, 2, 3);
    pair.mask.bits.iter_mut().for_each(|b| *b = false);
    let model = rand_model(1, 3, 4);
    assert!(matches!(forward_backward(&pair, &model, Lambdas::default()), Err(Error::EmptyForegroundMask)));
}

// invariants ----------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn affinity_rows_are_distributions(seed in 0u64..10_000) {
        let pair = rand_pair(seed, 3, 3, 4);
        let model = rand_model(seed + 1, 4, 5);
        let inf = infer(&pair, &model).unwrap();
        for row in inf.affinity.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn reassembled_tokens_lie_in_dictionary_hull(seed in 0u64..10_000) {
        let pair = rand_pair(seed, 3, 4, 4);
        let model = rand_model(seed + 7, 4, 5);
        let inf = infer(&pair, &model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |row: ndarray::ArrayView1<f64>| row.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>();
            let vals: Vec<f64> = inf.v.rows().into_iter().map(f).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for row in inf.z_hat.rows() {
                let v = f(row);
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn dictionary_order_does_not_matter(seed in 0u64..10_000) {
        let pair = rand_pair(seed, 3, 3, 4);
        let model = rand_model(seed + 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..9).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut shuffled = pair.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let row = pair.render.row(src).to_vec();
            shuffled.render.data[dst * 4..dst * 4 + 4].copy_from_slice(&row);
        }
        let a = loss(&pair, &model, Lambdas::default()).unwrap();
        let b = loss(&shuffled, &model, Lambdas::default()).unwrap();
        prop_assert!((a.local - b.local).abs() < 1e-9);
        prop_assert!((a.global - b.global).abs() < 1e-9);
        let ga = score_grid(&pair, &model).unwrap();
        let gb = score_grid(&shuffled, &model).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_scores_are_bounded_and_masked(seed in 0u64..10_000) {
        let pair = rand_pair(seed, 4, 3, 4);
        let model = rand_model(seed + 5, 4, 6);
        let g = score_grid(&pair, &model).unwrap();
        for (p, &v) in g.iter().enumerate() {
            prop_assert!((0.0..=2.0).contains(&v));
            if !pair.mask.bits[p] {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}

// scoring -------------------------------------------------------------------

#[test]
fn matched_tokens_score_zero_and_antipodal_scores_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let z = rand_tokens(&mut rng, 3, 3, 4);
    let zr = Array2::from_shape_fn((9, 4), |(i, j)| z.row(i)[j] as f64);
    let w = PatchMask::filled(3, 3, true);
    assert!(score_grid_from(&zr, &zr, &w).iter().all(|&v| v.abs() < 1e-12));
    let mut zh = zr.clone();
    zh.row_mut(4).mapv_inplace(|v| -v);
    let g = score_grid_from(&zr, &zh, &w);
    assert!((g[4] - 2.0).abs() < 1e-12);
    let max = g.iter().copied().fold(0.0, f64::max);
    assert_eq!(max, g[4]);
}

#[test]
fn upsampled_cells_average_to_grid_values() {
    let (gh, gw, patch) = (6, 7, 14);
    let grid: Vec<f64> = (0..gh * gw)
        .map(|i| 0.3 + 0.05 * (i / gw) as f64 - 0.02 * (i % gw) as f64)
        .collect();
    let map = upsample_bilinear(&grid, gh, gw, gh * patch, gw * patch);
    for r in 1..gh - 1 {
        for c in 1..gw - 1 {
            let mut s = 0.0;
            for y in 0..patch {
                for x in 0..patch {
                    s += map.get(c * patch + x, r * patch + y) as f64;
                }
            }
            let mean = s / (patch * patch) as f64;
            assert!((mean - grid[r * gw + c]).abs() < 1e-3, "cell ({r},{c})");
        }
    }
}

#[test]
fn score_map_is_zero_off_mask() {
    let pair = rand_pair(40, 3, 3, 4);
    let model = rand_model(41, 4, 5);
    let mask = Mask::from_fn(42, 42, |x, y| x > 10 && y < 30);
    let map = score_map(&pair, &model, 42, 42, Some(&mask)).unwrap();
    assert_eq!((map.width, map.height), (42, 42));
    for (v, &m) in map.data.iter().zip(&mask.data) {
        if !m {
            assert_eq!(*v, 0.0);
        }
        assert!(*v >= 0.0);
    }
}

#[test]
fn image_score_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let map = ImageF32::from_fn(120, 90, |_, _| rng.random_range(0.0f32..1.0));
    let mask = Mask::from_fn(120, 90, |x, _| x < 100);
    let fg: Vec<f32> = map.data.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let k = (fg.len() as f64 * 0.001).floor().max(1.0) as usize;
    let mut sorted = fg.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let want = sorted[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64;
    assert!((image_score(&map, Some(&mask)) - want).abs() < 1e-9);
    let mut hot = ImageF32::new(30, 30);
    hot.data[17] = 0.42;
    assert!((image_score(&hot, None) - 0.42).abs() < 1e-7);
}

// training ------------------------------------------------------------------

fn small_train_pairs(n: usize, seed: u64) -> Vec<PairTokens> {
    let cfg = DatasetConfig {
        seed,
        image_size: 252,
        ..DatasetConfig::default()
    };
    let gen = Generator::new(&cfg).unwrap();
    let plans: Vec<_> = gen.plans().iter().filter(|p| p.split == Split::Train).take(n).cloned().collect();
    plans
        .iter()
        .map(|p| {
            let pair = gen.pair(p).unwrap();
            PairTokens::from_images(pair.id(), &pair.real, &pair.render, &pair.mask_w, false, 14, 0.5).unwrap()
        })
        .collect()
}

#[test]
fn overfits_a_single_pair() {
    let pairs = small_train_pairs(1, 3);
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let out = train(&pairs, &cfg).unwrap();
    let init = CalibrationModel::init(pairs[0].real.dim, cfg.embed_dim(pairs[0].real.dim), true, true, cfg.seed).unwrap();
    let before = loss(&pairs[0], &init, cfg.lambdas()).unwrap().total;
    let after = loss(&pairs[0], &out.model, cfg.lambdas()).unwrap().total;
    assert!(after < 0.3 * before, "{after} vs {before}");
    assert_eq!(out.history.len(), 200);
}

#[test]
fn training_is_deterministic() {
    let pairs = small_train_pairs(5, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&pairs, &cfg).unwrap();
    let b = train(&pairs, &cfg).unwrap();
    let bits = |h: &[EpochLoss]| h.iter().map(|r| (r.local.to_bits(), r.global.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    let c = train(&pairs, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.model.to_bytes(), c.model.to_bytes());
}

#[test]
fn global_term_keeps_global_alignment() {
    let pairs = small_train_pairs(4, 5);
    let base = TrainConfig {
        epochs: 60,
        batch: 2,
        ..TrainConfig::default()
    };
    let with = train(&pairs, &base).unwrap();
    let without = train(&pairs, &TrainConfig { lambda_global: 0.0, ..base.clone() }).unwrap();
    let mean_global = |m: &CalibrationModel| {
        pairs.iter().map(|p| loss(p, m, Lambdas::default()).unwrap().global).sum::<f64>() / pairs.len() as f64
    };
    let (g_with, g_without) = (mean_global(&with.model), mean_global(&without.model));
    assert!(g_without > g_with, "{g_without} vs {g_with}");
}

#[test]
fn anomalous_pairs_are_refused() {
    let mut pairs = small_train_pairs(2, 6);
    pairs[1].anomalous = true;
    let err = train(&pairs, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::AnomalousTrainingPair { ref pair_id } if *pair_id == pairs[1].id));
}

#[test]
fn invalid_configs_are_rejected() {
    let pairs = small_train_pairs(1, 7);
    for cfg in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { lambda_local: -1.0, ..TrainConfig::default() },
        TrainConfig { batch: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&pairs, &cfg), Err(Error::Config { .. })));
    }
}

#[test]
fn checkpoint_and_history_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let m = rand_model(60, 10, 32);
    let path = dir.path().join("model.calm");
    save_model(&m, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), m);
    let hist = vec![
        EpochLoss { epoch: 0, local: 0.5, global: 0.25, total: 0.75 },
        EpochLoss { epoch: 1, local: 0.1 + 0.2, global: 1e-9, total: 0.3 + 1e-9 },
    ];
    let csv = dir.path().join("loss.csv");
    write_loss_csv(&hist, &csv).unwrap();
    assert_eq!(read_loss_csv(&csv).unwrap(), hist);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("epoch,L_local,L_global,L_total\n"));
}

#[test]
fn adamw_step_matches_closed_form() {
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(1, &cfg);
    let mut p = [0.5];
    opt.step(&mut p, &[0.2]);
    // first step: m_hat = g, v_hat = g^2, so the update is lr (sign(g) + wd p)
    let want = 0.5 - cfg.lr * (0.2 / (0.2 + cfg.eps) + cfg.weight_decay * 0.5);
    assert!((p[0] - want).abs() < 1e-15);
}

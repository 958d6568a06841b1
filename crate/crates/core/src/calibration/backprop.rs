//! Forward pass and hand-derived reverse pass of the calibration objective,
//! generic over the float type (f32 for training, f64 for checking).
//!
//! Shapes: `F_r, F_s: N×din`, `Z = φ(F): N×d`, `Q = Z_r W_q`, `K = Z_s W_e`,
//! `V = Z_s W_d`, `S = c Q Kᵀ` with `c = 1/√d`, `M = softmax_rows(S)`,
//! `Ẑ = M V`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, NdFloat, Zip};

use super::{CalibrationModel, Projector};

pub(crate) struct ProjOut<T> {
    pub z: Array2<T>,
    /// Post-ramp hidden activations; `None` for identity projectors.
    pub h: Option<Array2<T>>,
}

pub(crate) fn relu<T: NdFloat>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub(crate) fn project<T: NdFloat>(f: &Array2<T>, p: Option<&Projector<T>>, d: usize) -> ProjOut<T> {
    match p {
        Some(p) => {
            let mut h = f.dot(&p.w1) + &p.b1;
            h.mapv_inplace(relu);
            let z = h.dot(&p.w2) + &p.b2;
            ProjOut { z, h: Some(h) }
        }
        None => {
            let mut z = Array2::zeros((f.nrows(), d));
            let c = f.ncols().min(d);
            z.slice_mut(s![.., ..c]).assign(&f.slice(s![.., ..c]));
            ProjOut { z, h: None }
        }
    }
}

/// Row-wise softmax. Weights below `exp(-60)` of the row maximum are
/// flushed to zero: they are far below f64 resolution of the row sum, and
/// in f32 their products with gradients fall into slow subnormal arithmetic.
pub(crate) fn softmax_rows<T: NdFloat>(s: &mut Array2<T>) {
    let cutoff = T::from(-60.0).expect("representable");
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            let e = *v - max;
            *v = if e < cutoff { T::zero() } else { e.exp() };
            sum += *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub(crate) fn cosine<T: NdFloat>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// `(∂cos/∂a, ∂cos/∂b)`, zero under the zero-vector convention.
fn cosine_grad<T: NdFloat>(a: ArrayView1<T>, b: ArrayView1<T>) -> Option<(Array1<T>, Array1<T>)> {
    let na2 = a.dot(&a);
    let nb2 = b.dot(&b);
    if na2 == T::zero() || nb2 == T::zero() {
        return None;
    }
    let nanb = (na2 * nb2).sqrt();
    let cos = a.dot(&b) / nanb;
    let da = &b / nanb - &a * (cos / na2);
    let db = &a / nanb - &b * (cos / nb2);
    Some((da, db))
}

fn col_mean<T: NdFloat>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(Axis(0)) / T::from(a.nrows()).expect("n fits")
}

pub(crate) struct Forward<T> {
    pub zr: ProjOut<T>,
    pub zs: ProjOut<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub m: Array2<T>,
    pub zhat: Array2<T>,
}

pub(crate) fn forward<T: NdFloat>(fr: &Array2<T>, fs: &Array2<T>, net: &CalibrationModel<T>) -> Forward<T> {
    let zr = project(fr, net.phi_r.as_ref(), net.d);
    let zs = project(fs, net.phi_s.as_ref(), net.d);
    let q = zr.z.dot(&net.w_q);
    let k = zs.z.dot(&net.w_e);
    let v = zs.z.dot(&net.w_d);
    let c = T::one() / T::from(net.d).expect("d fits the float type").sqrt();
    let mut m = q.dot(&k.t());
    m.mapv_inplace(|x| x * c);
    softmax_rows(&mut m);
    let zhat = m.dot(&v);
    Forward {
        zr,
        zs,
        q,
        k,
        v,
        m,
        zhat,
    }
}

/// `(L_local, L_global)`. `w` must contain at least one set bit.
pub(crate) fn losses<T: NdFloat>(fw: &Forward<T>, w: &[bool]) -> (T, T) {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (p, _) in w.iter().enumerate().filter(|(_, &b)| b) {
        sum += T::one() - cosine(fw.zr.z.row(p), fw.zhat.row(p));
        count += 1;
    }
    let local = sum / T::from(count).expect("count fits");
    let gh = col_mean(&fw.zhat);
    let gs = col_mean(&fw.zs.z);
    let global = T::one() - cosine(gh.view(), gs.view());
    (local, global)
}

fn projector_backward<T: NdFloat>(f: &Array2<T>, out: &ProjOut<T>, p: &Projector<T>, dz: &Array2<T>) -> Projector<T> {
    let h = out.h.as_ref().expect("learned projector keeps activations");
    let w2 = h.t().dot(dz);
    let b2 = dz.sum_axis(Axis(0));
    let mut dh = dz.dot(&p.w2.t());
    Zip::from(&mut dh).and(h).for_each(|g, &hv| {
        if hv <= T::zero() {
            *g = T::zero();
        }
    });
    let w1 = f.t().dot(&dh);
    let b1 = dh.sum_axis(Axis(0));
    Projector { w1, b1, w2, b2 }
}

/// Gradient of `λ_l L_local + λ_g L_global` with respect to every weight.
///
/// The global term contributes a rank-one `1 uᵀ` to `∂L/∂Ẑ`, so `∂L/∂M`
/// and `∂L/∂V` are formed from the masked rows plus a broadcast vector
/// instead of full `N×N×d` products.
pub(crate) fn backward<T: NdFloat>(
    fr: &Array2<T>,
    fs: &Array2<T>,
    w: &[bool],
    net: &CalibrationModel<T>,
    fw: &Forward<T>,
    lambda_local: T,
    lambda_global: T,
) -> CalibrationModel<T> {
    let n = fw.m.nrows();
    let d = net.d;
    let nf = T::from(n).expect("n fits");
    let c = T::one() / T::from(d).expect("d fits").sqrt();
    let widx: Vec<usize> = (0..n).filter(|&p| w[p]).collect();
    let sw = T::from(widx.len().max(1)).expect("fits");

    // local term: rows of dẐ and dZ_r inside the mask
    let mut dzr = Array2::<T>::zeros((n, d));
    let mut dloc = Array2::<T>::zeros((widx.len(), d));
    if lambda_local != T::zero() {
        let scale = -lambda_local / sw;
        for (r, &p) in widx.iter().enumerate() {
            if let Some((da, db)) = cosine_grad(fw.zr.z.row(p), fw.zhat.row(p)) {
                dzr.row_mut(p).scaled_add(scale, &da);
                dloc.row_mut(r).scaled_add(scale, &db);
            }
        }
    }

    // global term: ∂/∂Ẑ[p] = u_hat and ∂/∂Z_s[p] = u_s for every row
    let mut u_hat = Array1::<T>::zeros(d);
    let mut u_s = Array1::<T>::zeros(d);
    if lambda_global != T::zero() {
        let gh = col_mean(&fw.zhat);
        let gs = col_mean(&fw.zs.z);
        if let Some((dgh, dgs)) = cosine_grad(gh.view(), gs.view()) {
            let scale = -lambda_global / nf;
            u_hat = dgh * scale;
            u_s = dgs * scale;
        }
    }

    // ∂L/∂M = D_loc Vᵀ (masked rows) + 1 (V u_hat)ᵀ
    let r_vec = fw.v.dot(&u_hat);
    let dm_w = dloc.dot(&fw.v.t());
    let mut ds = Array2::<T>::zeros((n, n));
    let mut slot = vec![usize::MAX; n];
    for (r, &p) in widx.iter().enumerate() {
        slot[p] = r;
    }
    let mut dm_row = Array1::<T>::zeros(n);
    for p in 0..n {
        dm_row.assign(&r_vec);
        if slot[p] != usize::MAX {
            dm_row += &dm_w.row(slot[p]);
        }
        let m_row = fw.m.row(p);
        let dot = m_row.dot(&dm_row);
        Zip::from(ds.row_mut(p))
            .and(&m_row)
            .and(&dm_row)
            .for_each(|o, &mv, &g| *o = mv * (g - dot));
    }

    // ∂L/∂V = M_Wᵀ D_loc + colsum(M) u_hatᵀ
    let m_w = fw.m.select(Axis(0), &widx);
    let mut dv = m_w.t().dot(&dloc);
    let colsum = fw.m.sum_axis(Axis(0));
    for (mut row, &cs) in dv.rows_mut().into_iter().zip(colsum.iter()) {
        row.scaled_add(cs, &u_hat);
    }

    let mut dq = ds.dot(&fw.k);
    dq.mapv_inplace(|x| x * c);
    let mut dk = ds.t().dot(&fw.q);
    dk.mapv_inplace(|x| x * c);

    let g_wq = fw.zr.z.t().dot(&dq);
    dzr += &dq.dot(&net.w_q.t());
    let g_we = fw.zs.z.t().dot(&dk);
    let g_wd = fw.zs.z.t().dot(&dv);
    let mut dzs = dk.dot(&net.w_e.t());
    dzs += &dv.dot(&net.w_d.t());
    dzs += &u_s;

    let phi_r = net.phi_r.as_ref().map(|p| projector_backward(fr, &fw.zr, p, &dzr));
    let phi_s = net.phi_s.as_ref().map(|p| projector_backward(fs, &fw.zs, p, &dzs));
    CalibrationModel {
        dim_in: net.dim_in,
        d,
        phi_r,
        phi_s,
        w_q: g_wq,
        w_e: g_we,
        w_d: g_wd,
    }
}

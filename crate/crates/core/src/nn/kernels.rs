//! Dense kernels with hand-written backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, cin, h, w]`, `weight: [cout, cin, k, k]` → `[n, cout, ho, wo]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (k_rows, npix) = (g.rows(), ho * wo);
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); batch * cout * npix];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k_rows * npix] };
    let wmat = Mat::row_major(weight, cout, k_rows);
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * npix..(b + 1) * cout * npix];
        let colmat = if g.is_pointwise() {
            Mat::row_major(xb, k_rows, npix)
        } else {
            im2col(xb, g, &mut cols);
            Mat::row_major(&cols, k_rows, npix)
        };
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(npix).enumerate() {
                row.fill(bias[co]);
            }
            gemm(T::one(), wmat, colmat, T::one(), ob);
        } else {
            gemm(T::one(), wmat, colmat, T::zero(), ob);
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dout: &[T],
    dweight: &mut [T],
    mut dbias: Option<&mut [T]>,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (k_rows, npix) = (g.rows(), ho * wo);
    let in_len = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); batch * in_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k_rows * npix] };
    let mut dcols = vec![T::zero(); k_rows * npix];
    let wmat = Mat::row_major(weight, cout, k_rows);
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db = &dout[b * cout * npix..(b + 1) * cout * npix];
        let dmat = Mat::row_major(db, cout, npix);
        let colmat = if g.is_pointwise() {
            Mat::row_major(xb, k_rows, npix)
        } else {
            im2col(xb, g, &mut cols);
            Mat::row_major(&cols, k_rows, npix)
        };
        gemm(T::one(), dmat, colmat.t(), T::one(), dweight);
        if let Some(dbias) = dbias.as_deref_mut() {
            for (co, row) in db.chunks(npix).enumerate() {
                dbias[co] += row.iter().copied().sum::<T>();
            }
        }
        let dxb = &mut dx[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(T::one(), wmat.t(), dmat, T::zero(), dxb);
        } else {
            gemm(T::one(), wmat.t(), dmat, T::zero(), &mut dcols);
            col2im_add(&dcols, g, dxb);
        }
    }
    dx
}

pub(crate) const GN_EPS: f64 = 1e-5;

/// Returns `(y, mean, rstd)` with one statistic per `(sample, group)`.
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let cg = c / groups;
    let m = cg * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cg) * hw;
            let seg = &x[start..start + m];
            let mean = seg.iter().copied().sum::<T>() / T::of(m as f64);
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(m as f64);
            let rstd = T::one() / (var + T::of(GN_EPS)).sqrt();
            for (j, &v) in seg.iter().enumerate() {
                let ch = gi * cg + j / hw;
                y[start + j] = gamma[ch] * (v - mean) * rstd + beta[ch];
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    groups: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let cg = c / groups;
    let m = cg * hw;
    let mf = T::of(m as f64);
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..n {
        for gi in 0..groups {
            let idx = b * groups + gi;
            let (mu, rs) = (mean[idx], rstd[idx]);
            let start = (b * c + gi * cg) * hw;
            let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
            for j in 0..m {
                let ch = gi * cg + j / hw;
                let xhat = (x[start + j] - mu) * rs;
                let g = dy[start + j];
                dgamma[ch] += g * xhat;
                dbeta[ch] += g;
                let dxhat = g * gamma[ch];
                sum_d += dxhat;
                sum_dx += dxhat * xhat;
            }
            for j in 0..m {
                let ch = gi * cg + j / hw;
                let xhat = (x[start + j] - mu) * rs;
                let dxhat = dy[start + j] * gamma[ch];
                dx[start + j] = rs / mf * (mf * dxhat - sum_d - xhat * sum_dx);
            }
        }
    }
    dx
}

/// Single-head attention over the spatial positions of `[c, l]` planes.
/// Returns the output and the softmax probabilities `[n, l, l]`.
pub(crate) fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, c: usize, l: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut out = vec![T::zero(); n * c * l];
    let mut probs = vec![T::zero(); n * l * l];
    for b in 0..n {
        let (qb, kb, vb) = (&q[b * c * l..][..c * l], &k[b * c * l..][..c * l], &v[b * c * l..][..c * l]);
        let p = &mut probs[b * l * l..][..l * l];
        gemm(scale, Mat::row_major(qb, c, l).t(), Mat::row_major(kb, c, l), T::zero(), p);
        for row in p.chunks_mut(l) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        gemm(T::one(), Mat::row_major(vb, c, l), Mat::row_major(p, l, l).t(), T::zero(), &mut out[b * c * l..][..c * l]);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    c: usize,
    l: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(c as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n * c * l], vec![T::zero(); n * c * l], vec![T::zero(); n * c * l]);
    let mut ds = vec![T::zero(); l * l];
    for b in 0..n {
        let o = b * c * l;
        let (qb, kb, vb, gb) = (&q[o..o + c * l], &k[o..o + c * l], &v[o..o + c * l], &dout[o..o + c * l]);
        let p = &probs[b * l * l..][..l * l];
        let pm = Mat::row_major(p, l, l);
        let gm = Mat::row_major(gb, c, l);
        // dV = dO · P
        gemm(T::one(), gm, pm, T::zero(), &mut dv[o..o + c * l]);
        // dP = dOᵀ · V, then softmax backward in place.
        gemm(T::one(), gm.t(), Mat::row_major(vb, c, l), T::zero(), &mut ds);
        for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in drow.iter_mut().zip(prow) {
                *d = pp * (*d - dot);
            }
        }
        let dsm = Mat::row_major(&ds, l, l);
        // dQ = K · dSᵀ · scale, dK = Q · dS · scale
        gemm(scale, Mat::row_major(kb, c, l), dsm.t(), T::zero(), &mut dq[o..o + c * l]);
        gemm(scale, Mat::row_major(qb, c, l), dsm, T::zero(), &mut dk[o..o + c * l]);
    }
    (dq, dk, dv)
}

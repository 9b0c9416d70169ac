use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamSet};
use crate::real::{gemm, Mat, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Conv { x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeom },
    Linear { x: Var, w: ParamId, b: ParamId },
    GroupNorm { x: Var, gamma: ParamId, beta: ParamId, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel { x: Var, e: Var },
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Upsample2x(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation so it can be differentiated.
pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients from [`Graph::backward`]: a flat parameter gradient plus the
/// gradient of every node that received one.
pub struct Grads<T> {
    pub params: Vec<T>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor { shape: [0; 4], data: Vec::new() })
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// 2-D convolution; the weight block must be `[cout, cin, k, k]`.
    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Var {
        let ws = &self.params.spec(w).shape;
        let (cout, k) = (ws[0], ws[2]);
        let xs = self.value(x).shape;
        assert_eq!(ws[1], xs[1], "conv input channels for {}", self.params.spec(w).name);
        let geom = ConvGeom { cin: xs[1], h: xs[2], w: xs[3], k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let data = kernels::conv_forward(
            &self.value(x).data,
            xs[0],
            &geom,
            self.params.get(w),
            b.map(|b| self.params.get(b)),
            cout,
        );
        self.push(Tensor { shape: [xs[0], cout, ho, wo], data }, Op::Conv { x, w, b, geom })
    }

    /// `x: [n, in]`, weight `[out, in]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let ws = &self.params.spec(w).shape;
        let (dout, din) = (ws[0], ws[1]);
        let xv = self.value(x);
        let n = xv.n();
        assert_eq!(xv.sample_len(), din, "linear input width for {}", self.params.spec(w).name);
        let bias = self.params.get(b);
        let mut data = Vec::with_capacity(n * dout);
        for _ in 0..n {
            data.extend_from_slice(bias);
        }
        gemm(
            T::one(),
            Mat::row_major(&xv.data, n, din),
            Mat::row_major(self.params.get(w), dout, din).t(),
            T::one(),
            &mut data,
        );
        self.push(Tensor { shape: [n, dout, 1, 1], data }, Op::Linear { x, w, b })
    }

    pub fn group_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, groups: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.c() % groups, 0, "group count must divide channels");
        let (data, mean, rstd) =
            kernels::group_norm_forward(&xv.data, xv.shape, groups, self.params.get(gamma), self.params.get(beta));
        let shape = xv.shape;
        self.push(Tensor { shape, data }, Op::GroupNorm { x, gamma, beta, groups, mean, rstd })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let shape = av.shape;
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "mul shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let shape = av.shape;
        self.push(Tensor { shape, data }, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    /// Adds a per-sample, per-channel vector `e: [n, c]` to every pixel of `x`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (xv, ev) = (self.value(x), self.value(e));
        assert_eq!((xv.n(), xv.c()), (ev.n(), ev.sample_len()), "add_channel shapes");
        let hw = xv.h() * xv.w();
        let mut v = xv.clone();
        for (plane, &bias) in v.data.chunks_mut(hw).zip(&ev.data) {
            for p in plane {
                *p += bias;
            }
        }
        self.push(v, Op::AddChannel { x, e })
    }

    /// Channel-axis concatenation, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.n(), av.h(), av.w()), (bv.n(), bv.h(), bv.w()), "concat shapes");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.n() {
            data.extend_from_slice(av.sample(i));
            data.extend_from_slice(bv.sample(i));
        }
        let shape = [av.n(), av.c() + bv.c(), av.h(), av.w()];
        self.push(Tensor { shape, data }, Op::Concat(a, b))
    }

    /// Channels `start .. start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.c(), "channel slice out of range");
        let hw = xv.h() * xv.w();
        let mut data = Vec::with_capacity(xv.n() * len * hw);
        for i in 0..xv.n() {
            data.extend_from_slice(&xv.sample(i)[start * hw..(start + len) * hw]);
        }
        let shape = [xv.n(), len, xv.h(), xv.w()];
        self.push(Tensor { shape, data }, Op::Slice { x, start })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w) = (xv.h(), xv.w());
        let mut out = Tensor::zeros([xv.n(), xv.c(), 2 * h, 2 * w]);
        for (src, dst) in xv.data.chunks(h * w).zip(out.data.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    dst[y * 2 * w + x2] = src[(y / 2) * w + x2 / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x(x))
    }

    /// Spatial self-attention; `q`, `k`, `v` share shape `[n, c, h, w]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let s = self.value(q).shape;
        assert_eq!(s, self.value(k).shape);
        assert_eq!(s, self.value(v).shape);
        let (data, probs) = kernels::attention_forward(
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
            s[0],
            s[1],
            s[2] * s[3],
        );
        self.push(Tensor { shape: s, data }, Op::Attention { q, k, v, probs })
    }

    /// Reverse pass seeded with `∂L/∂v` for each `(v, grad)` pair.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrad = vec![T::zero(); self.params.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape, self.value(v).shape, "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let wspec = self.params.spec(*w).clone();
                    let cout = wspec.shape[0];
                    let (dw, rest) = split_param(&mut pgrad, &wspec, b.map(|b| self.params.spec(b).offset));
                    let dx = kernels::conv_backward(
                        &xv.data,
                        xv.n(),
                        geom,
                        self.params.get(*w),
                        cout,
                        &g.data,
                        dw,
                        rest,
                    );
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape, data: dx });
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let ws = &self.params.spec(*w).shape;
                    let (dout, din, n) = (ws[0], ws[1], xv.n());
                    let gm = Mat::row_major(&g.data, n, dout);
                    {
                        let s = self.params.spec(*w);
                        let dw = &mut pgrad[s.offset..s.offset + s.len()];
                        gemm(T::one(), gm.t(), Mat::row_major(&xv.data, n, din), T::one(), dw);
                    }
                    let bo = self.params.spec(*b).offset;
                    for row in g.data.chunks(dout) {
                        for (j, &v) in row.iter().enumerate() {
                            pgrad[bo + j] += v;
                        }
                    }
                    let mut dx = vec![T::zero(); n * din];
                    gemm(T::one(), gm, Mat::row_major(self.params.get(*w), dout, din), T::zero(), &mut dx);
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape, data: dx });
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    let xv = self.value(*x);
                    let c = xv.c();
                    let (go, bo) = (self.params.spec(*gamma).offset, self.params.spec(*beta).offset);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let dx = kernels::group_norm_backward(
                        &xv.data,
                        xv.shape,
                        *groups,
                        self.params.get(*gamma),
                        mean,
                        rstd,
                        &g.data,
                        &mut dgamma,
                        &mut dbeta,
                    );
                    for j in 0..c {
                        pgrad[go + j] += dgamma[j];
                        pgrad[bo + j] += dbeta[j];
                    }
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape, data: dx });
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&a, &d)| {
                            let s = sigmoid(a);
                            d * s * (T::one() + a * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor { shape: xv.shape, data });
                }
                Op::Tanh(x) => {
                    let data = node.value.data.iter().zip(&g.data).map(|(&y, &d)| d * (T::one() - y * y)).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Exp(x) => {
                    let data = node.value.data.iter().zip(&g.data).map(|(&y, &d)| d * y).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data.iter().zip(&bv.data).map(|(&d, &y)| d * y).collect();
                    let db = g.data.iter().zip(&av.data).map(|(&d, &x)| d * x).collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape, data: da });
                    accumulate(&mut grads, *b, Tensor { shape: g.shape, data: db });
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|d| d * s));
                }
                Op::AddChannel { x, e } => {
                    let ev = self.value(*e);
                    let hw = g.h() * g.w();
                    let de = g.data.chunks(hw).map(|plane| plane.iter().copied().sum::<T>()).collect();
                    accumulate(&mut grads, *e, Tensor { shape: ev.shape, data: de });
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Concat(a, b) => {
                    let (ac, bc) = (self.value(*a).shape, self.value(*b).shape);
                    let (la, lb) = (ac[1] * ac[2] * ac[3], bc[1] * bc[2] * bc[3]);
                    let mut da = Vec::with_capacity(ac[0] * la);
                    let mut db = Vec::with_capacity(bc[0] * lb);
                    for s in g.data.chunks(la + lb) {
                        da.extend_from_slice(&s[..la]);
                        db.extend_from_slice(&s[la..]);
                    }
                    accumulate(&mut grads, *a, Tensor { shape: ac, data: da });
                    accumulate(&mut grads, *b, Tensor { shape: bc, data: db });
                }
                Op::Slice { x, start } => {
                    let xs = self.value(*x).shape;
                    let hw = xs[2] * xs[3];
                    let mut dx = Tensor::zeros(xs);
                    let len = g.sample_len();
                    for i in 0..xs[0] {
                        dx.sample_mut(i)[start * hw..start * hw + len].copy_from_slice(g.sample(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2x(x) => {
                    let xs = self.value(*x).shape;
                    let (h, w) = (xs[2], xs[3]);
                    let mut dx = Tensor::zeros(xs);
                    for (src, dst) in g.data.chunks(4 * h * w).zip(dx.data.chunks_mut(h * w)) {
                        for y in 0..2 * h {
                            for x2 in 0..2 * w {
                                dst[(y / 2) * w + x2 / 2] += src[y * 2 * w + x2];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, probs } => {
                    let s = g.shape;
                    let (dq, dk, dv) = kernels::attention_backward(
                        &self.value(*q).data,
                        &self.value(*k).data,
                        &self.value(*v).data,
                        probs,
                        &g.data,
                        s[0],
                        s[1],
                        s[2] * s[3],
                    );
                    accumulate(&mut grads, *q, Tensor { shape: s, data: dq });
                    accumulate(&mut grads, *k, Tensor { shape: s, data: dk });
                    accumulate(&mut grads, *v, Tensor { shape: s, data: dv });
                }
            }
        }
        Grads { params: pgrad, nodes: grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Splits the flat gradient into the weight block and an optional bias block
/// so both can be borrowed mutably at once.
fn split_param<'a, T>(
    pgrad: &'a mut [T],
    wspec: &super::ParamSpec,
    bias_offset: Option<usize>,
) -> (&'a mut [T], Option<&'a mut [T]>) {
    let (wo, wl) = (wspec.offset, wspec.len());
    let cout = wspec.shape[0];
    match bias_offset {
        None => (&mut pgrad[wo..wo + wl], None),
        Some(bo) if bo >= wo + wl => {
            let (lo, hi) = pgrad.split_at_mut(bo);
            (&mut lo[wo..wo + wl], Some(&mut hi[..cout]))
        }
        Some(bo) => {
            let (lo, hi) = pgrad.split_at_mut(wo);
            (&mut hi[..wl], Some(&mut lo[bo..bo + cout]))
        }
    }
}

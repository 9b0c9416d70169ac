use alloc::format;
use alloc::string::String;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamSet};
use crate::real::Real;

/// Registers parameters under a name prefix, optionally drawing initial values.
pub struct Builder<'a, T, R> {
    pub ps: &'a mut ParamSet<T>,
    pub rng: Option<&'a mut R>,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.ps.add(name, shape, init, self.rng.as_deref_mut())
    }
}

fn fan_in_bound(fan_in: usize) -> Init {
    Init::Uniform(1.0 / libm::sqrt(fan_in as f64))
}

/// Largest divisor of `channels` not exceeding `target`.
pub(crate) fn groups_for(channels: usize, target: usize) -> usize {
    (1..=target.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let fan = cin * k * k;
        let init = if zero { Init::Zeros } else { fan_in_bound(fan) };
        let w = bld.param(format!("{name}.weight"), &[cout, cin, k, k], init);
        let b = bld.param(format!("{name}.bias"), &[cout], init);
        Conv { w, b, stride, pad: k / 2 }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.conv(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, name: &str, din: usize, dout: usize) -> Self {
        let init = fan_in_bound(din);
        let w = bld.param(format!("{name}.weight"), &[dout, din], init);
        let b = bld.param(format!("{name}.bias"), &[dout], init);
        Linear { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = bld.param(format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = bld.param(format!("{name}.beta"), &[channels], Init::Zeros);
        GroupNorm { gamma, beta, groups: groups_for(channels, groups) }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.group_norm(x, self.gamma, self.beta, self.groups)
    }
}

/// Pre-activation residual block with an additive per-channel embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(bld, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(bld, &format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb: Linear::new(bld, &format!("{name}.emb"), emb_dim, cout),
            norm2: GroupNorm::new(bld, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(bld, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| Conv::new(bld, &format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    /// `emb` is the already-activated conditioning vector `[n, emb_dim]`.
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, emb: Var) -> Var {
        let h = self.norm1.apply(g, x);
        let h = g.silu(h);
        let h = self.conv1.apply(g, h);
        let e = self.emb.apply(g, emb);
        let h = g.add_channel(h, e);
        let h = self.norm2.apply(g, h);
        let h = g.silu(h);
        let h = self.conv2.apply(g, h);
        let skip = match &self.skip {
            Some(s) => s.apply(g, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    norm: GroupNorm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

impl AttnBlock {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, name: &str, channels: usize, groups: usize) -> Self {
        AttnBlock {
            norm: GroupNorm::new(bld, &format!("{name}.norm"), channels, groups),
            q: Conv::new(bld, &format!("{name}.q"), channels, channels, 1, 1, false),
            k: Conv::new(bld, &format!("{name}.k"), channels, channels, 1, 1, false),
            v: Conv::new(bld, &format!("{name}.v"), channels, channels, 1, 1, false),
            proj: Conv::new(bld, &format!("{name}.proj"), channels, channels, 1, 1, false),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.norm.apply(g, x);
        let q = self.q.apply(g, h);
        let k = self.k.apply(g, h);
        let v = self.v.apply(g, h);
        let a = g.attention(q, k, v);
        let o = self.proj.apply(g, a);
        g.add(x, o)
    }
}

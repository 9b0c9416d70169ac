//! A small reverse-mode autodiff tape over [`Tensor`](crate::tensor::Tensor)s
//! with the layers a convolutional U-Net and autoencoder need.
//!
//! Parameters live in one flat [`ParamSet`]; gradients come back as a flat
//! vector with the same layout, which keeps the optimizer and checkpoint code
//! trivial.

mod graph;
mod kernels;
mod layers;
mod optim;
mod params;

pub use graph::{Grads, Graph, Var};
pub use layers::{AttnBlock, Builder, Conv, GroupNorm, Linear, ResBlock};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamSet, ParamSpec};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Net {
        conv: Conv,
        down: Conv,
        norm: GroupNorm,
        lin: Linear,
        res: ResBlock,
        attn: AttnBlock,
        up: Conv,
    }

    fn build(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) -> Net {
        let mut b = Builder { ps, rng: Some(rng) };
        Net {
            conv: Conv::new(&mut b, "conv", 4, 6, 3, 1, false),
            down: Conv::new(&mut b, "down", 6, 4, 3, 2, false),
            norm: GroupNorm::new(&mut b, "norm", 4, 2),
            lin: Linear::new(&mut b, "lin", 3, 5),
            res: ResBlock::new(&mut b, "res", 4, 6, 5, 3),
            attn: AttnBlock::new(&mut b, "attn", 6, 3),
            up: Conv::new(&mut b, "up", 6, 2, 3, 1, false),
        }
    }

    /// Exercises every tape op; returns `(output, input vars)`.
    fn forward<'p>(net: &Net, g: &mut Graph<'p, f64>, x: &Tensor<f64>, c: &Tensor<f64>) -> (Var, Var, Var) {
        let xi = g.input(x.clone());
        let ci = g.input(c.clone());
        let h = net.conv.apply(g, xi);
        let h = g.silu(h);
        let h = net.down.apply(g, h);
        let h = net.norm.apply(g, h);
        let e = net.lin.apply(g, ci);
        let e = g.silu(e);
        let h = net.res.apply(g, h, e);
        let h = net.attn.apply(g, h);
        let a = g.slice_channels(h, 1, 3);
        let b = g.slice_channels(h, 0, 3);
        let m = g.mul(a, b);
        let t = g.tanh(m);
        let s = g.scale(t, 0.7);
        let ex = g.exp(s);
        let cat = g.concat(ex, b);
        let u = g.upsample2x(cat);
        let y = net.up.apply(g, u);
        (y, xi, ci)
    }

    #[test]
    fn tape_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::<f64>::default();
        let net = build(&mut ps, &mut rng);
        // Perturb norm affine params away from (1, 0) so they matter.
        for v in ps.values.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let x = Tensor::from_vec([2, 4, 6, 6], (0..288).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = Tensor::from_vec([2, 3, 1, 1], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let probe: Vec<f64>;
        let grads = {
            let mut g = Graph::new(&ps);
            let (y, xi, _) = forward(&net, &mut g, &x, &c);
            probe = (0..g.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seed = Tensor { shape: g.value(y).shape, data: probe.clone() };
            let gr = g.backward(alloc::vec![(y, seed)]);
            (gr.params.clone(), gr.of(xi).unwrap().clone())
        };
        let loss = |ps: &ParamSet<f64>, x: &Tensor<f64>| {
            let mut g = Graph::new(ps);
            let (y, _, _) = forward(&net, &mut g, x, &c);
            g.value(y).data.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..ps.len()).step_by(7) {
            let mut p = ps.clone();
            p.values[i] += h;
            let up = loss(&p, &x);
            p.values[i] -= 2.0 * h;
            let dn = loss(&p, &x);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads.0[i]).abs() / fd.abs().max(grads.0[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&ps, &xp);
            xp.data[i] -= 2.0 * h;
            let dn = loss(&ps, &xp);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads.1.data[i]).abs() / fd.abs().max(grads.1.data[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }
}

//! Time-conditional U-Net noise predictor.
//!
//! The MR latent, when present, is concatenated with the noisy latent along
//! the channel axis before the first convolution. The text condition is
//! projected and added to the timestep embedding, and the fused vector biases
//! every residual block.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttnBlock, Builder, Conv, GroupNorm, Graph, Linear, ParamSet, ParamSpec, ResBlock, Var};
use crate::prompt::{ConditionVector, COND_DIM};
use crate::real::Real;
use crate::seed;
use crate::tensor::{Latent, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub mr_conditioned: bool,
    pub base_width: usize,
    /// Width multiplier per resolution level; each level after the first halves
    /// the spatial size.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Level that gets the self-attention block, if any.
    pub attention_level: Option<usize>,
    pub time_features: usize,
    pub cond_dim: usize,
    pub norm_groups: usize,
}

impl DenoiserConfig {
    /// Base width 64, three resolutions, two residual blocks per level, and
    /// self-attention at the middle (8×8 for 16×16 latents) level.
    pub fn desk(latent_channels: usize, mr_conditioned: bool) -> Self {
        DenoiserConfig {
            latent_channels,
            latent_size: 16,
            mr_conditioned,
            base_width: 64,
            channel_mults: alloc::vec![1, 2, 2],
            res_blocks: 2,
            attention_level: Some(1),
            time_features: 128,
            cond_dim: COND_DIM,
            norm_groups: 8,
        }
    }

    /// Same topology as [`desk`](Self::desk) at a quarter of the width and one
    /// residual block per level; trains on a single CPU core.
    pub fn compact(latent_channels: usize, mr_conditioned: bool) -> Self {
        DenoiserConfig { base_width: 16, res_blocks: 1, norm_groups: 4, ..Self::desk(latent_channels, mr_conditioned) }
    }

    /// Few-thousand-parameter network for gradient verification.
    pub fn tiny(latent_channels: usize, latent_size: usize, mr_conditioned: bool) -> Self {
        DenoiserConfig {
            latent_channels,
            latent_size,
            mr_conditioned,
            base_width: 4,
            channel_mults: alloc::vec![1, 2],
            res_blocks: 1,
            attention_level: Some(1),
            time_features: 8,
            cond_dim: COND_DIM,
            norm_groups: 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.mr_conditioned {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }

    pub fn emb_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("denoiser: {m}")));
        if self.latent_channels == 0 || self.base_width == 0 || self.res_blocks == 0 {
            return bad("channel counts and res_blocks must be positive");
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive");
        }
        let levels = self.channel_mults.len();
        if self.latent_size == 0 || self.latent_size % (1 << (levels - 1)) != 0 {
            return bad("latent_size must be divisible by 2^(levels-1)");
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return bad("time_features must be positive and even");
        }
        if self.cond_dim != COND_DIM {
            return bad("cond_dim must match the prompt embedding length");
        }
        if self.attention_level.is_some_and(|l| l >= levels) {
            return bad("attention_level out of range");
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Option<AttnBlock>,
    /// Strided downsampling conv (down path only).
    resample: Option<Conv>,
    /// Nearest-neighbour 2× upsampling after the level (up path only).
    upsample: bool,
}

#[derive(Clone, Debug)]
struct UNet {
    time1: Linear,
    time2: Linear,
    cond: Linear,
    conv_in: Conv,
    down: Vec<Level>,
    mid: [ResBlock; 2],
    up: Vec<Level>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

impl UNet {
    fn build<T: Real, R: Rng>(cfg: &DenoiserConfig, bld: &mut Builder<'_, T, R>) -> Self {
        let (w, emb, gr) = (cfg.base_width, cfg.emb_dim(), cfg.norm_groups);
        let levels = cfg.channel_mults.len();
        let time1 = Linear::new(bld, "time.fc1", cfg.time_features, emb);
        let time2 = Linear::new(bld, "time.fc2", emb, emb);
        let cond = Linear::new(bld, "cond.proj", cfg.cond_dim, emb);
        let conv_in = Conv::new(bld, "conv_in", cfg.in_channels(), w, 3, 1, false);
        let mut ch = w;
        let mut down = Vec::new();
        for (l, &mult) in cfg.channel_mults.iter().enumerate() {
            let out = w * mult;
            let mut blocks = Vec::new();
            for i in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(bld, &format!("down.{l}.res.{i}"), ch, out, emb, gr));
                ch = out;
            }
            let attn = (cfg.attention_level == Some(l)).then(|| AttnBlock::new(bld, &format!("down.{l}.attn"), ch, gr));
            let resample = (l + 1 < levels).then(|| Conv::new(bld, &format!("down.{l}.downsample"), ch, ch, 3, 2, false));
            down.push(Level { blocks, attn, resample, upsample: false });
        }
        let mid = [
            ResBlock::new(bld, "mid.res.0", ch, ch, emb, gr),
            ResBlock::new(bld, "mid.res.1", ch, ch, emb, gr),
        ];
        // Each up block consumes the matching down block's output as a skip.
        let mut up = Vec::new();
        for (l, &mult) in cfg.channel_mults.iter().enumerate().rev() {
            let out = w * mult;
            let mut blocks = Vec::new();
            for i in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(bld, &format!("up.{l}.res.{i}"), ch + out, out, emb, gr));
                ch = out;
            }
            up.push(Level { blocks, attn: None, resample: None, upsample: l > 0 });
        }
        let out_norm = GroupNorm::new(bld, "out.norm", ch, gr);
        let out_conv = Conv::new(bld, "out.conv", ch, cfg.latent_channels, 3, 1, true);
        UNet { time1, time2, cond, conv_in, down, mid, up, out_norm, out_conv }
    }
}

/// Sinusoidal features `[sin(t·f_i), cos(t·f_i)]` with
/// `f_i = 10000^(-i / (dim/2))`, as an `[n, dim]` tensor.
pub fn timestep_features<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| libm::exp(-libm::log(10_000.0) * i as f64 / half as f64) * ti as f64);
        data.extend(freqs.clone().map(|a| T::of(libm::sin(a))));
        data.extend(freqs.map(|a| T::of(libm::cos(a))));
    }
    Tensor { shape: [t.len(), dim, 1, 1], data }
}

pub(crate) fn condition_tensor<T: Real>(cond: &[ConditionVector]) -> Tensor<T> {
    let data = cond.iter().flat_map(|c| c.values.iter().map(|&v| T::of(v as f64))).collect();
    Tensor { shape: [cond.len(), COND_DIM, 1, 1], data }
}

/// Channel-axis concatenation with `z_t` first.
pub fn concat_mr<T: Real>(z_t: &Latent<T>, mr_latent: &Latent<T>) -> Result<Latent<T>> {
    if (z_t.n(), z_t.h(), z_t.w()) != (mr_latent.n(), mr_latent.h(), mr_latent.w()) {
        return Err(Error::shape(z_t.shape, mr_latent.shape));
    }
    let mut data = Vec::with_capacity(z_t.len() + mr_latent.len());
    for i in 0..z_t.n() {
        data.extend_from_slice(z_t.sample(i));
        data.extend_from_slice(mr_latent.sample(i));
    }
    Tensor::from_vec([z_t.n(), z_t.c() + mr_latent.c(), z_t.h(), z_t.w()], data)
}

/// Anything that predicts the noise in a batch of noisy latents.
pub trait NoisePredictor<T: Real> {
    fn mr_conditioned(&self) -> bool;

    fn predict(&self, z_t: &Tensor<T>, t: &[usize], mr: Option<&Tensor<T>>, cond: &[ConditionVector]) -> Result<Tensor<T>>;
}

/// One denoiser query.
#[derive(Clone, Debug)]
pub struct DenoiserInput<T> {
    pub z_t: Latent<T>,
    pub t: usize,
    pub mr_latent: Option<Latent<T>>,
    pub text: ConditionVector,
}

#[derive(Clone, Debug)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    pub params: ParamSet<T>,
    net: UNet,
}

/// Seeded initialization in `f32`.
pub fn init_denoiser(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserParams<f32>> {
    DenoiserParams::init(cfg, seed)
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, "denoiser/init", 0);
        let mut params = ParamSet::default();
        let net = UNet::build(cfg, &mut Builder { ps: &mut params, rng: Some(&mut rng) });
        Ok(DenoiserParams { config: cfg.clone(), params, net })
    }

    /// Rebuilds the layout for `cfg` and installs stored values.
    pub fn from_values(cfg: &DenoiserConfig, specs: &[ParamSpec], values: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let net = UNet::build(cfg, &mut Builder::<T, ChaCha8Rng> { ps: &mut params, rng: None });
        params.load(specs, values)?;
        Ok(DenoiserParams { config: cfg.clone(), params, net })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Input width of the first convolution.
    pub fn first_layer_in_channels(&self) -> usize {
        self.params.spec(self.net.conv_in.w).shape[1]
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams { config: self.config.clone(), params: self.params.cast(), net: self.net.clone() }
    }

    pub(crate) fn check_inputs(
        &self,
        z: &Tensor<T>,
        t_len: usize,
        mr: Option<&Tensor<T>>,
        cond_len: usize,
    ) -> Result<()> {
        let c = &self.config;
        let n = z.n();
        let expected = [n, c.latent_channels, c.latent_size, c.latent_size];
        if z.shape != expected {
            return Err(Error::shape(expected, z.shape));
        }
        match (c.mr_conditioned, mr) {
            (true, None) => return Err(Error::ConditioningMismatch("model expects an MR latent".into())),
            (false, Some(_)) => {
                return Err(Error::ConditioningMismatch("text-only model was given an MR latent".into()))
            }
            (true, Some(m)) if m.shape != z.shape => return Err(Error::shape(z.shape, m.shape)),
            _ => {}
        }
        if t_len != n || cond_len != n {
            return Err(Error::shape(n, (t_len, cond_len)));
        }
        Ok(())
    }

    /// Records the forward pass on `g`, whose parameter set must be `self.params`.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        t: &[usize],
        mr: Option<Var>,
        cond: &[ConditionVector],
    ) -> Result<Var> {
        {
            let mr_t = mr.map(|m| g.value(m).clone());
            self.check_inputs(g.value(z), t.len(), mr_t.as_ref(), cond.len())?;
        }
        let net = &self.net;
        let tf = g.input(timestep_features(t, self.config.time_features));
        let ci = g.input(condition_tensor(cond));
        let e = net.time1.apply(g, tf);
        let e = g.silu(e);
        let e = net.time2.apply(g, e);
        let ce = net.cond.apply(g, ci);
        let e = g.add(e, ce);
        let emb = g.silu(e);

        let x = match mr {
            Some(m) => g.concat(z, m),
            None => z,
        };
        let mut h = net.conv_in.apply(g, x);
        let mut skips = Vec::new();
        for level in &net.down {
            for block in &level.blocks {
                h = block.apply(g, h, emb);
                skips.push(h);
            }
            if let Some(attn) = &level.attn {
                h = attn.apply(g, h);
                *skips.last_mut().expect("skip") = h;
            }
            if let Some(ds) = &level.resample {
                h = ds.apply(g, h);
            }
        }
        for block in &net.mid {
            h = block.apply(g, h, emb);
        }
        for level in &net.up {
            for block in &level.blocks {
                let s = skips.pop().expect("skip");
                let cat = g.concat(h, s);
                h = block.apply(g, cat, emb);
            }
            if level.upsample {
                h = g.upsample2x(h);
            }
        }
        let h = net.out_norm.apply(g, h);
        let h = g.silu(h);
        Ok(net.out_conv.apply(g, h))
    }

    pub fn predict_noise(&self, input: &DenoiserInput<T>) -> Result<Latent<T>> {
        self.predict(&input.z_t, &[input.t], input.mr_latent.as_ref(), core::slice::from_ref(&input.text))
    }
}

impl<T: Real> NoisePredictor<T> for DenoiserParams<T> {
    fn mr_conditioned(&self) -> bool {
        self.config.mr_conditioned
    }

    fn predict(&self, z_t: &Tensor<T>, t: &[usize], mr: Option<&Tensor<T>>, cond: &[ConditionVector]) -> Result<Tensor<T>> {
        self.check_inputs(z_t, t.len(), mr, cond.len())?;
        let mut g = Graph::new(&self.params);
        let z = g.input(z_t.clone());
        let m = mr.map(|m| g.input(m.clone()));
        let out = self.forward(&mut g, z, t, m, cond)?;
        Ok(g.into_value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{embed, null_condition, PromptSpec};
    use rand::SeedableRng;

    fn randn(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let cfg = DenoiserConfig::tiny(2, 8, false);
        let a = init_denoiser(&cfg, 3).unwrap();
        assert_eq!(a.params, init_denoiser(&cfg, 3).unwrap().params);
        assert_ne!(a.params.values, init_denoiser(&cfg, 4).unwrap().params.values);
    }

    #[test]
    fn mr_model_widens_only_first_layer() {
        let text = init_denoiser(&DenoiserConfig::desk(4, false), 1).unwrap();
        let mr = init_denoiser(&DenoiserConfig::desk(4, true), 1).unwrap();
        assert_eq!(text.first_layer_in_channels(), 4);
        assert_eq!(mr.first_layer_in_channels(), 8);
        assert_eq!(text.params.specs.len(), mr.params.specs.len());
        for (a, b) in text.params.specs.iter().zip(&mr.params.specs) {
            assert_eq!(a.name, b.name);
            if a.name != "conv_in.weight" {
                assert_eq!(a.shape, b.shape, "{}", a.name);
            }
        }
    }

    #[test]
    fn desk_parameter_count_under_budget() {
        let p = DenoiserParams::<f32>::init(&DenoiserConfig::desk(4, true), 0).unwrap();
        assert!(p.param_count() < 5_000_000, "{}", p.param_count());
    }

    #[test]
    fn shapes_and_conditioning_contract() {
        let cfg = DenoiserConfig::tiny(2, 8, true);
        let mut p = init_denoiser(&cfg, 9).unwrap();
        // Break the zero-initialized output layer so outputs depend on inputs.
        for v in p.params.values.iter_mut() {
            if *v == 0.0 {
                *v = 0.05;
            }
        }
        let z = randn([1, 2, 8, 8], 1);
        let m = randn([1, 2, 8, 8], 2);
        let c = embed(&PromptSpec::later(13).unwrap());
        for t in [0, 1, 500, 999] {
            let out = p.predict(&z, &[t], Some(&m), &[c]).unwrap();
            assert_eq!(out.shape, z.shape);
            assert!(out.is_finite());
        }
        let input = DenoiserInput { z_t: z.clone(), t: 10, mr_latent: Some(m.clone()), text: c };
        assert_eq!(p.predict_noise(&input).unwrap(), p.predict_noise(&input).unwrap());
        assert!(matches!(p.predict(&z, &[1], None, &[c]), Err(Error::ConditioningMismatch(_))));
        let wrong = randn([1, 2, 4, 4], 3);
        assert!(matches!(p.predict(&z, &[1], Some(&wrong), &[c]), Err(Error::ShapeMismatch { .. })));
        let text_only = init_denoiser(&DenoiserConfig::tiny(2, 8, false), 9).unwrap();
        assert!(matches!(text_only.predict(&z, &[1], Some(&m), &[c]), Err(Error::ConditioningMismatch(_))));
        let a = p.predict(&z, &[5], Some(&m), &[c]).unwrap();
        let b = p.predict(&z, &[5], Some(&m), &[null_condition()]).unwrap();
        assert!(a.sq_dist(&b) > 0.0);
    }

    #[test]
    fn finite_outputs_for_large_inputs() {
        let cfg = DenoiserConfig::compact(4, true);
        let mut p = init_denoiser(&cfg, 2).unwrap();
        let out_w = p.params.find("out.conv.weight").unwrap();
        for v in p.params.get_mut(out_w) {
            *v = 0.01;
        }
        let z = randn([2, 4, 16, 16], 4).map(|v| v * 10.0);
        let m = randn([2, 4, 16, 16], 5).map(|v| v * 10.0);
        let c = embed(&PromptSpec::later(0).unwrap());
        let out = p.predict(&z, &[0, 999], Some(&m), &[c, c]).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn concat_orders_noisy_latent_first() {
        let a = randn([1, 4, 16, 16], 1);
        let b = randn([1, 4, 16, 16], 2);
        let ab = concat_mr(&a, &b).unwrap();
        assert_eq!(ab.shape, [1, 8, 16, 16]);
        assert_eq!(&ab.data[..a.len()], &a.data[..]);
        assert_ne!(ab, concat_mr(&b, &a).unwrap());
        assert!(concat_mr(&a, &randn([1, 4, 8, 8], 3)).is_err());
    }

    #[test]
    fn timestep_features_layout() {
        let f = timestep_features::<f64>(&[0, 7], 8);
        assert_eq!(f.shape, [2, 8, 1, 1]);
        assert_eq!(&f.data[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((f.data[8] - 7f64.sin()).abs() < 1e-12);
    }
}

//! Image autoencoder mapping 64×64 images to 16×16 latents.
//!
//! The learned mode is a small KL-regularized convolutional VAE whose encoder
//! mean is standardized per channel with statistics measured on the training
//! images. The identity mode is an exact 4×4 space-to-depth rearrangement and
//! serves as a lossless reference.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image2D, Modality};
use crate::nn::{Adam, AdamConfig, Builder, Conv, Graph, GroupNorm, Init, ParamId, ParamSet, ParamSpec, Var};
use crate::real::Real;
use crate::seed;
use crate::tensor::{Latent, Tensor};

/// Spatial reduction factor of both modes.
pub const DOWNSAMPLE: usize = 4;

/// PSNR reported for a lossless reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

const NORM_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoencoderMode {
    Learned,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub mode: AutoencoderMode,
    pub image_size: usize,
    pub latent_channels: usize,
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub kl_weight: f64,
}

impl AutoencoderConfig {
    pub fn learned(image_size: usize) -> Self {
        AutoencoderConfig {
            mode: AutoencoderMode::Learned,
            image_size,
            latent_channels: 4,
            widths: [8, 16, 32],
            kl_weight: 1e-6,
        }
    }

    pub fn identity(image_size: usize) -> Self {
        AutoencoderConfig {
            mode: AutoencoderMode::Identity,
            image_size,
            latent_channels: DOWNSAMPLE * DOWNSAMPLE,
            widths: [0; 3],
            kl_weight: 0.0,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / DOWNSAMPLE
    }

    pub fn latent_shape(&self, n: usize) -> [usize; 4] {
        [n, self.latent_channels, self.latent_size(), self.latent_size()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("autoencoder: {m}")));
        if self.image_size < DOWNSAMPLE || !self.image_size.is_power_of_two() {
            return bad("image_size must be a power of two >= 4");
        }
        match self.mode {
            AutoencoderMode::Identity if self.latent_channels != DOWNSAMPLE * DOWNSAMPLE => {
                bad("identity mode needs 16 latent channels")
            }
            AutoencoderMode::Learned if self.latent_channels == 0 || self.widths.contains(&0) => {
                bad("learned mode needs non-zero widths and latent channels")
            }
            _ if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) => bad("kl_weight must be >= 0"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig { steps: 2500, batch_size: 8, lr: 2e-3 }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<(Conv, GroupNorm)>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    // (conv, norm, upsample before the conv)
    convs: Vec<(Conv, GroupNorm, bool)>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct AeNet {
    enc: Encoder,
    dec: Decoder,
    shift: ParamId,
    scale: ParamId,
}

impl AeNet {
    fn build<T: Real, R: Rng>(cfg: &AutoencoderConfig, bld: &mut Builder<'_, T, R>) -> Self {
        let [c1, c2, c3] = cfg.widths;
        let c = cfg.latent_channels;
        let enc_layers = [(1, c1, 1), (c1, c2, 2), (c2, c2, 1), (c2, c3, 2), (c3, c3, 1)];
        let enc = Encoder {
            convs: enc_layers
                .iter()
                .enumerate()
                .map(|(i, &(cin, cout, stride))| {
                    let conv = Conv::new(bld, &format!("enc.{i}"), cin, cout, 3, stride, false);
                    (conv, GroupNorm::new(bld, &format!("enc.{i}.norm"), cout, NORM_GROUPS))
                })
                .collect(),
            out: Conv::new(bld, "enc.out", c3, 2 * c, 3, 1, false),
        };
        let dec_layers = [(c, c3, false), (c3, c3, false), (c3, c2, true), (c2, c2, false), (c2, c1, true)];
        let dec = Decoder {
            convs: dec_layers
                .iter()
                .enumerate()
                .map(|(i, &(cin, cout, up))| {
                    let conv = Conv::new(bld, &format!("dec.{i}"), cin, cout, 3, 1, false);
                    (conv, GroupNorm::new(bld, &format!("dec.{i}.norm"), cout, NORM_GROUPS), up)
                })
                .collect(),
            out: Conv::new(bld, "dec.out", c1, 1, 3, 1, false),
        };
        let shift = bld.param("latent.shift".into(), &[c], Init::Zeros);
        let scale = bld.param("latent.scale".into(), &[c], Init::Ones);
        AeNet { enc, dec, shift, scale }
    }
}

/// Trained (or identity) autoencoder.
#[derive(Clone, Debug)]
pub struct AutoencoderParams<T = f32> {
    pub config: AutoencoderConfig,
    pub params: ParamSet<T>,
    net: Option<AeNet>,
}

impl<T: Real> AutoencoderParams<T> {
    pub fn init(cfg: &AutoencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut rng = seed::rng(seed, "autoencoder/init", 0);
        let net = (cfg.mode == AutoencoderMode::Learned)
            .then(|| AeNet::build(cfg, &mut Builder { ps: &mut params, rng: Some(&mut rng) }));
        Ok(AutoencoderParams { config: cfg.clone(), params, net })
    }

    pub fn from_values(cfg: &AutoencoderConfig, specs: &[ParamSpec], values: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let net = (cfg.mode == AutoencoderMode::Learned)
            .then(|| AeNet::build(cfg, &mut Builder::<T, ChaCha8Rng> { ps: &mut params, rng: None }));
        params.load(specs, values)?;
        Ok(AutoencoderParams { config: cfg.clone(), params, net })
    }

    pub fn cast<U: Real>(&self) -> AutoencoderParams<U> {
        AutoencoderParams { config: self.config.clone(), params: self.params.cast(), net: self.net.clone() }
    }

    pub fn images_to_tensor(&self, images: &[Image2D]) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Err(Error::EmptyInput);
        }
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for im in images {
            if im.size() != s {
                return Err(Error::shape([s, s], [im.size(), im.size()]));
            }
            data.extend(im.pixels().iter().map(|&p| T::of(p as f64)));
        }
        Tensor::from_vec([images.len(), 1, s, s], data)
    }

    fn encode_graph(&self, net: &AeNet, g: &mut Graph<'_, T>, x: Var) -> (Var, Var) {
        let mut h = x;
        for (conv, norm) in &net.enc.convs {
            h = conv.apply(g, h);
            h = norm.apply(g, h);
            h = g.silu(h);
        }
        let out = net.enc.out.apply(g, h);
        let c = self.config.latent_channels;
        (g.slice_channels(out, 0, c), g.slice_channels(out, c, c))
    }

    fn decode_graph(&self, net: &AeNet, g: &mut Graph<'_, T>, z: Var) -> Var {
        let mut h = z;
        for (conv, norm, up) in &net.dec.convs {
            if *up {
                h = g.upsample2x(h);
            }
            h = conv.apply(g, h);
            h = norm.apply(g, h);
            h = g.silu(h);
        }
        net.dec.out.apply(g, h)
    }

    /// Encoder mean before standardization.
    fn raw_mean(&self, net: &AeNet, x: Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new(&self.params);
        let xv = g.input(x);
        let (mu, _) = self.encode_graph(net, &mut g, xv);
        g.into_value(mu)
    }

    pub fn encode(&self, images: &[Image2D]) -> Result<Latent<T>> {
        let x = self.images_to_tensor(images)?;
        let Some(net) = &self.net else {
            return Ok(space_to_depth(&x));
        };
        let mut parts = Vec::new();
        for chunk in x.data.chunks(16 * x.sample_len()) {
            let n = chunk.len() / x.sample_len();
            let mu = self.raw_mean(net, Tensor { shape: [n, 1, x.h(), x.w()], data: chunk.to_vec() });
            parts.extend(mu.data);
        }
        let mut z = Tensor { shape: self.config.latent_shape(x.n()), data: parts };
        let (shift, scale) = (self.params.get(net.shift), self.params.get(net.scale));
        let hw = z.h() * z.w();
        for (i, v) in z.data.iter_mut().enumerate() {
            let ch = (i / hw) % shift.len();
            *v = (*v - shift[ch]) / scale[ch];
        }
        Ok(z)
    }

    /// Decoder output clipped to `[-1, 1]`.
    pub fn decode_tensor(&self, z: &Latent<T>) -> Result<Tensor<T>> {
        let expected = self.config.latent_shape(z.n());
        if z.shape != expected {
            return Err(Error::shape(expected, z.shape));
        }
        let Some(net) = &self.net else {
            return Ok(depth_to_space(z).map(|v| v.max(-T::one()).min(T::one())));
        };
        let (shift, scale) = (self.params.get(net.shift), self.params.get(net.scale));
        let hw = z.h() * z.w();
        let mut raw = z.clone();
        for (i, v) in raw.data.iter_mut().enumerate() {
            let ch = (i / hw) % shift.len();
            *v = *v * scale[ch] + shift[ch];
        }
        let mut out = Vec::new();
        for chunk in raw.data.chunks(16 * raw.sample_len()) {
            let n = chunk.len() / raw.sample_len();
            let mut g = Graph::new(&self.params);
            let zv = g.input(Tensor { shape: [n, z.c(), z.h(), z.w()], data: chunk.to_vec() });
            let r = self.decode_graph(net, &mut g, zv);
            out.extend(g.into_value(r).data);
        }
        let s = self.config.image_size;
        let x = Tensor::from_vec([z.n(), 1, s, s], out)?;
        Ok(x.map(|v| v.max(-T::one()).min(T::one())))
    }

    pub fn decode(&self, z: &Latent<T>, modality: Modality) -> Result<Vec<Image2D>> {
        let x = self.decode_tensor(z)?;
        let s = self.config.image_size;
        (0..x.n())
            .map(|i| Image2D::clamped(s, x.sample(i).iter().map(|v| v.f64()), modality))
            .collect()
    }

    /// One optimization step's loss and flat gradient for a batch of images.
    pub fn loss_and_grad(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(f64, Vec<T>)> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("identity autoencoder has nothing to train".into()))?;
        let mut g = Graph::new(&self.params);
        let xv = g.input(x.clone());
        let (mu, lv) = self.encode_graph(net, &mut g, xv);
        let half = g.scale(lv, T::of(0.5));
        let std = g.exp(half);
        let ev = g.input(eps.clone());
        let noise = g.mul(std, ev);
        let z = g.add(mu, noise);
        let r = self.decode_graph(net, &mut g, z);

        let rv = g.value(r);
        let npix = rv.len() as f64;
        let mut mse = 0.0;
        let mut dr = rv.clone();
        for (d, (&a, &b)) in dr.data.iter_mut().zip(rv.data.iter().zip(&x.data)) {
            let e = (a - b).f64();
            mse += e * e;
            *d = T::of(2.0 * e / npix);
        }
        mse /= npix;

        let lam = self.config.kl_weight;
        let (muv, lvv) = (g.value(mu).clone(), g.value(lv).clone());
        let nl = muv.len() as f64;
        let mut kl = 0.0;
        let mut dmu = muv.clone();
        let mut dlv = lvv.clone();
        for i in 0..muv.len() {
            let (m, l) = (muv.data[i].f64(), lvv.data[i].f64());
            let el = libm::exp(l);
            kl += 0.5 * (m * m + el - 1.0 - l);
            dmu.data[i] = T::of(lam * m / nl);
            dlv.data[i] = T::of(lam * 0.5 * (el - 1.0) / nl);
        }
        let loss = mse + lam * kl / nl;
        let grads = g.backward(vec![(r, dr), (mu, dmu), (lv, dlv)]);
        Ok((loss, grads.params))
    }

    /// Sets the per-channel standardization from the encoder means of `images`.
    pub fn fit_latent_stats(&mut self, images: &[Image2D]) -> Result<()> {
        let Some(net) = self.net.clone() else { return Ok(()) };
        let c = self.config.latent_channels;
        self.params.get_mut(net.shift).fill(T::zero());
        self.params.get_mut(net.scale).fill(T::one());
        let z = self.encode(images)?;
        let hw = z.h() * z.w();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, v) in z.data.iter().enumerate() {
            let ch = (i / hw) % c;
            sum[ch] += v.f64();
            sq[ch] += v.f64() * v.f64();
        }
        let count = (z.n() * hw) as f64;
        for ch in 0..c {
            let mean = sum[ch] / count;
            let var = (sq[ch] / count - mean * mean).max(0.0);
            self.params.get_mut(net.shift)[ch] = T::of(mean);
            self.params.get_mut(net.scale)[ch] = T::of(libm::sqrt(var).max(1e-6));
        }
        Ok(())
    }
}

/// Trains a learned autoencoder on `images`; identity configs are returned
/// unchanged with an empty loss curve. `on_step` sees every raw batch loss.
pub fn train_autoencoder(
    images: &[Image2D],
    cfg: &AutoencoderConfig,
    train: &AeTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<(AutoencoderParams<f32>, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ae = AutoencoderParams::<f32>::init(cfg, seed)?;
    if cfg.mode == AutoencoderMode::Identity {
        return Ok((ae, Vec::new()));
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidConfig("autoencoder batch_size must be positive".into()));
    }
    let all = ae.images_to_tensor(images)?;
    let mut opt = Adam::new(AdamConfig { lr: train.lr, ..AdamConfig::default() }, ae.params.len());
    let mut curve = Vec::with_capacity(train.steps as usize);
    let b = train.batch_size;
    let sl = all.sample_len();
    for step in 0..train.steps {
        let mut rng = seed::rng(seed, "autoencoder/step", step);
        let mut data = Vec::with_capacity(b * sl);
        for _ in 0..b {
            let i = rng.gen_range(0..all.n());
            data.extend_from_slice(all.sample(i));
        }
        let x = Tensor { shape: [b, 1, all.h(), all.w()], data };
        let eps_shape = cfg.latent_shape(b);
        let eps_len = eps_shape.iter().product();
        let eps = Tensor { shape: eps_shape, data: (0..eps_len).map(|_| rng.sample(StandardNormal)).collect() };
        let (loss, grad) = ae.loss_and_grad(&x, &eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        opt.config.lr = cosine_lr(train.lr, step, train.steps);
        opt.update(&mut ae.params.values, &grad);
        curve.push(loss);
        on_step(step, loss);
    }
    ae.fit_latent_stats(images)?;
    Ok((ae, curve))
}

/// Cosine decay from `lr` to a tenth of it over `steps`.
fn cosine_lr(lr: f64, step: u64, steps: u64) -> f64 {
    let frac = step as f64 / steps.max(1) as f64;
    lr * (0.1 + 0.45 * (1.0 + libm::cos(core::f64::consts::PI * frac)))
}

/// PSNR of `b` against `a` with a peak-to-peak range of 2.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    }).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(4.0 / mse)).min(PSNR_CAP_DB))
}

/// Mean per-image PSNR of encode-then-decode reconstructions.
pub fn reconstruction_psnr<T: Real>(ae: &AutoencoderParams<T>, images: &[Image2D]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let z = ae.encode(images)?;
    let rec = ae.decode(&z, images[0].modality)?;
    let mut total = 0.0;
    for (a, b) in images.iter().zip(&rec) {
        total += psnr(a.pixels(), b.pixels())?;
    }
    Ok(total / images.len() as f64)
}

fn space_to_depth<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, s) = (x.n(), x.h());
    let (f, ls) = (DOWNSAMPLE, s / DOWNSAMPLE);
    let mut out = Tensor::zeros([n, f * f, ls, ls]);
    for i in 0..n {
        let src = x.sample(i);
        let dst = out.sample_mut(i);
        for r in 0..s {
            for c in 0..s {
                let ch = (r % f) * f + c % f;
                dst[(ch * ls + r / f) * ls + c / f] = src[r * s + c];
            }
        }
    }
    out
}

fn depth_to_space<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let (n, ls) = (z.n(), z.h());
    let (f, s) = (DOWNSAMPLE, z.h() * DOWNSAMPLE);
    let mut out = Tensor::zeros([n, 1, s, s]);
    for i in 0..n {
        let src = z.sample(i);
        let dst = out.sample_mut(i);
        for r in 0..s {
            for c in 0..s {
                let ch = (r % f) * f + c % f;
                dst[r * s + c] = src[(ch * ls + r / f) * ls + c / f];
            }
        }
    }
    out
}

//! Noise-prediction objectives and the optimization loop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph};
use crate::prompt::{null_condition, ConditionVector};
use crate::real::Real;
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::tensor::{Latent, Tensor};

/// One sampled minibatch: clean latents, optional MR latents, conditions,
/// per-element timesteps and the noise to inject.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T = f32> {
    pub tau_latents: Latent<T>,
    pub mr_latents: Option<Latent<T>>,
    pub conditions: Vec<ConditionVector>,
    pub timesteps: Vec<usize>,
    pub noise: Latent<T>,
}

impl<T: Real> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.tau_latents.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        self.tau_latents.same_shape(&self.noise)?;
        if let Some(m) = &self.mr_latents {
            self.tau_latents.same_shape(m)?;
        }
        if self.conditions.len() != n || self.timesteps.len() != n {
            return Err(Error::shape(n, (self.conditions.len(), self.timesteps.len())));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= schedule.steps()) {
            return Err(Error::InvalidTimestep { t, steps: schedule.steps() });
        }
        Ok(())
    }

    pub fn noised(&self, schedule: &NoiseSchedule) -> Result<Latent<T>> {
        schedule.q_sample(&self.tau_latents, &self.timesteps, &self.noise)
    }

    pub fn cast<U: Real>(&self) -> TrainBatch<U> {
        TrainBatch {
            tau_latents: self.tau_latents.cast(),
            mr_latents: self.mr_latents.as_ref().map(Tensor::cast),
            conditions: self.conditions.clone(),
            timesteps: self.timesteps.clone(),
            noise: self.noise.cast(),
        }
    }
}

fn mean_sq_err<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> f64 {
    pred.sq_dist(target) / pred.len() as f64
}

fn batch_loss<T: Real, M: NoisePredictor<T>>(
    model: &M,
    schedule: &NoiseSchedule,
    b: &TrainBatch<T>,
) -> Result<f64> {
    b.validate(schedule)?;
    let z_t = b.noised(schedule)?;
    let pred = model.predict(&z_t, &b.timesteps, b.mr_latents.as_ref(), &b.conditions)?;
    Ok(mean_sq_err(&pred, &b.noise))
}

/// Mean squared noise-prediction error of a text-only model.
pub fn loss_text<T: Real, M: NoisePredictor<T>>(model: &M, schedule: &NoiseSchedule, b: &TrainBatch<T>) -> Result<f64> {
    if model.mr_conditioned() || b.mr_latents.is_some() {
        return Err(Error::ConditioningMismatch("text objective needs a text-only model and batch".into()));
    }
    batch_loss(model, schedule, b)
}

/// Mean squared noise-prediction error with the MR latent concatenated to the
/// noisy input.
pub fn loss_text_mr<T: Real, M: NoisePredictor<T>>(
    model: &M,
    schedule: &NoiseSchedule,
    b: &TrainBatch<T>,
) -> Result<f64> {
    if !model.mr_conditioned() || b.mr_latents.is_none() {
        return Err(Error::ConditioningMismatch("MR objective needs an MR model and MR latents".into()));
    }
    batch_loss(model, schedule, b)
}

/// Loss and its flat parameter gradient; dispatches on the model's
/// conditioning.
pub fn loss_and_grad<T: Real>(
    p: &DenoiserParams<T>,
    schedule: &NoiseSchedule,
    b: &TrainBatch<T>,
) -> Result<(f64, Vec<T>)> {
    b.validate(schedule)?;
    let z_t = b.noised(schedule)?;
    let mut g = Graph::new(&p.params);
    let z = g.input(z_t);
    let mr = b.mr_latents.as_ref().map(|m| g.input(m.clone()));
    let out = p.forward(&mut g, z, &b.timesteps, mr, &b.conditions)?;
    let pred = g.value(out);
    let scale = 2.0 / pred.len() as f64;
    let mut seed_grad = pred.clone();
    for (d, (&a, &e)) in seed_grad.data.iter_mut().zip(pred.data.iter().zip(&b.noise.data)) {
        *d = T::of(scale * (a - e).f64());
    }
    let loss = mean_sq_err(pred, &b.noise);
    let grads = g.backward(vec![(out, seed_grad)]);
    Ok((loss, grads.params))
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` at the listed coordinates of `x`. The denominator is
/// `max(|analytic|, 1e-8)`.
pub fn finite_difference_error(
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Number of parameters [`grad_check`] probes.
pub const GRAD_CHECK_PARAMS: usize = 64;

/// Compares the backpropagated gradient of the batch loss with central
/// differences on randomly chosen parameters.
pub fn grad_check(p: &DenoiserParams<f64>, schedule: &NoiseSchedule, b: &TrainBatch<f64>, h: f64) -> Result<f64> {
    let (_, analytic) = loss_and_grad(p, schedule, b)?;
    let mut rng = seed::rng(p.params.len() as u64, "grad_check/params", 0);
    let k = GRAD_CHECK_PARAMS.min(p.params.len());
    let indices = sample_indices(&mut rng, p.params.len(), k).into_vec();
    let mut work = p.clone();
    let mut values = core::mem::take(&mut work.params.values);
    let mut failure = None;
    let err = finite_difference_error(&mut values, &analytic, &indices, h, |v| {
        work.params.values.clear();
        work.params.values.extend_from_slice(v);
        match batch_loss(&work, schedule, b) {
            Ok(l) => l,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub text_dropout: f64,
    pub mr_dropout: f64,
    pub checkpoint_every: u64,
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 16,
            lr: 1e-4,
            text_dropout: 0.1,
            mr_dropout: 0.1,
            checkpoint_every: 1000,
            smoothing_window: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(alloc::format!("train: {m}")));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.batch_size == 0 {
            bad("batch_size must be positive")
        } else if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad("lr must be positive")
        } else if !prob(self.text_dropout) || !prob(self.mr_dropout) {
            bad("dropout probabilities must lie in [0, 1]")
        } else if self.smoothing_window == 0 {
            bad("smoothing_window must be positive")
        } else {
            Ok(())
        }
    }
}

/// Precomputed training latents, one row per corpus entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub tau: Latent<f32>,
    pub mr: Option<Latent<f32>>,
    pub conditions: Vec<ConditionVector>,
}

impl LatentDataset {
    pub fn new(tau: Latent<f32>, mr: Option<Latent<f32>>, conditions: Vec<ConditionVector>) -> Result<Self> {
        if tau.n() == 0 {
            return Err(Error::EmptyCorpus);
        }
        if let Some(m) = &mr {
            tau.same_shape(m)?;
        }
        if conditions.len() != tau.n() {
            return Err(Error::shape(tau.n(), conditions.len()));
        }
        Ok(LatentDataset { tau, mr, conditions })
    }

    pub fn len(&self) -> usize {
        self.tau.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which condition slots were nulled in a batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropoutLog {
    pub text: Vec<bool>,
    pub mr: Vec<bool>,
}

/// Assembles the batch for `step`. Everything random is drawn from a stream
/// keyed by `(seed, step)`, so any step can be rebuilt independently.
pub fn sample_batch(
    data: &LatentDataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
    step: u64,
) -> (TrainBatch<f32>, DropoutLog) {
    let mut rng = seed::rng(seed, "train/batch", step);
    let b = cfg.batch_size;
    let sl = data.tau.sample_len();
    let [_, c, h, w] = data.tau.shape;
    let mut tau = Vec::with_capacity(b * sl);
    let mut mr = data.mr.as_ref().map(|_| Vec::with_capacity(b * sl));
    let mut conditions = Vec::with_capacity(b);
    let mut timesteps = Vec::with_capacity(b);
    let mut log = DropoutLog::default();
    for _ in 0..b {
        let i = rng.gen_range(0..data.len());
        tau.extend_from_slice(data.tau.sample(i));
        timesteps.push(rng.gen_range(0..schedule.steps()));
        let drop_text = rng.gen_bool(cfg.text_dropout);
        conditions.push(if drop_text { null_condition() } else { data.conditions[i] });
        log.text.push(drop_text);
        if let (Some(buf), Some(src)) = (mr.as_mut(), data.mr.as_ref()) {
            let drop_mr = rng.gen_bool(cfg.mr_dropout);
            if drop_mr {
                buf.extend(core::iter::repeat(0.0).take(sl));
            } else {
                buf.extend_from_slice(src.sample(i));
            }
            log.mr.push(drop_mr);
        }
    }
    let noise = (0..b * sl).map(|_| rng.sample(StandardNormal)).collect();
    let batch = TrainBatch {
        tau_latents: Tensor { shape: [b, c, h, w], data: tau },
        mr_latents: mr.map(|data| Tensor { shape: [b, c, h, w], data }),
        conditions,
        timesteps,
        noise: Tensor { shape: [b, c, h, w], data: noise },
    };
    (batch, log)
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DenoiserParams<f32>,
    pub optimizer: Adam<f32>,
    pub step: u64,
    /// Root of the per-step batch streams.
    pub seed: u64,
    /// Raw loss of every completed step.
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: DenoiserParams<f32>, cfg: &TrainConfig, seed: u64) -> Self {
        let optimizer = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.params.len());
        TrainState { model, optimizer, step: 0, seed, losses: Vec::new() }
    }

    /// Runs one optimizer step. A non-finite loss leaves the state untouched.
    pub fn step(&mut self, data: &LatentDataset, schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<f64> {
        if self.model.config.mr_conditioned != data.mr.is_some() {
            return Err(Error::ConditioningMismatch("dataset and model disagree on MR conditioning".into()));
        }
        let (batch, _) = sample_batch(data, schedule, cfg, self.seed, self.step);
        let (loss, grad) = loss_and_grad(&self.model, schedule, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        self.optimizer.update(&mut self.model.params.values, &grad);
        self.losses.push(loss);
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `cfg.steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &LatentDataset,
        schedule: &NoiseSchedule,
        cfg: &TrainConfig,
        mut on_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        cfg.validate()?;
        while self.step < cfg.steps {
            self.step(data, schedule, cfg)?;
            on_step(self)?;
        }
        Ok(())
    }
}

/// Trailing mean over at most `window` values ending at each position.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

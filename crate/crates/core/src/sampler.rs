//! Reverse-process generation with dual classifier-free guidance.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderParams;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::{Image2D, Modality};
use crate::prompt::{embed, null_condition, ConditionVector, PromptSpec};
use crate::real::Real;
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::tensor::{Latent, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ancestral,
    #[default]
    Deterministic,
}

/// Sampling knobs shared by every image of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_text: f64,
    pub guidance_mr: f64,
    pub kind: SamplerKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 50, guidance_text: 3.0, guidance_mr: 1.5, kind: SamplerKind::Deterministic }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.steps() {
            return Err(Error::InvalidRequest(format!(
                "num_steps {} outside 1..={}",
                self.num_steps,
                schedule.steps()
            )));
        }
        for (name, g) in [("guidance_text", self.guidance_text), ("guidance_mr", self.guidance_mr)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::InvalidRequest(format!("{name} must be a finite value >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub prompt: PromptSpec,
    pub mr_image: Option<Image2D>,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(prompt: PromptSpec, mr_image: Option<Image2D>, seed: u64) -> Self {
        SampleRequest { prompt, mr_image, sampler: SamplerConfig::default(), seed }
    }
}

/// Guided noise estimate for a single latent.
///
/// Text-only: `ε∅ + g_text·(ε_c − ε∅)`. MR-conditioned:
/// `ε∅∅ + g_mr·(ε_MR,∅ − ε∅∅) + g_text·(ε_MR,c − ε_MR,∅)`, where the null MR
/// is an all-zero latent. Terms with a zero coefficient are not evaluated and
/// unit scales return the fully conditioned prediction unchanged.
pub fn guided_noise<T: Real, M: NoisePredictor<T>>(
    model: &M,
    z_t: &Latent<T>,
    t: usize,
    mr_latent: Option<&Latent<T>>,
    cond: &ConditionVector,
    g_text: f64,
    g_mr: f64,
) -> Result<Latent<T>> {
    if !(g_text >= 0.0 && g_mr >= 0.0) {
        return Err(Error::InvalidRequest("guidance scales must be >= 0".into()));
    }
    if z_t.n() != 1 {
        return Err(Error::shape(1, z_t.n()));
    }
    let null = null_condition();
    let eval = |mr: Option<&Latent<T>>, c: &ConditionVector| model.predict(z_t, &[t], mr, core::slice::from_ref(c));
    match (model.mr_conditioned(), mr_latent) {
        (false, None) => {
            if g_text == 1.0 {
                return eval(None, cond);
            }
            let e_null = eval(None, &null)?;
            if g_text == 0.0 {
                return Ok(e_null);
            }
            let e_cond = eval(None, cond)?;
            Ok(combine(&e_null, &[(g_text, &e_cond, &e_null)]))
        }
        (true, Some(mr)) => {
            if g_text == 1.0 && g_mr == 1.0 {
                return eval(Some(mr), cond);
            }
            let zeros = Tensor::zeros(mr.shape);
            let e_nn = eval(Some(&zeros), &null)?;
            let e_mn = eval(Some(mr), &null)?;
            let mut terms = Vec::with_capacity(2);
            if g_mr != 0.0 {
                terms.push((g_mr, &e_mn, &e_nn));
            }
            let e_mc;
            if g_text != 0.0 {
                e_mc = eval(Some(mr), cond)?;
                terms.push((g_text, &e_mc, &e_mn));
            }
            Ok(combine(&e_nn, &terms))
        }
        (true, None) => Err(Error::ConditioningMismatch("MR-conditioned model needs an MR latent".into())),
        (false, Some(_)) => Err(Error::ConditioningMismatch("text-only model was given an MR latent".into())),
    }
}

fn combine<T: Real>(base: &Tensor<T>, terms: &[(f64, &Tensor<T>, &Tensor<T>)]) -> Tensor<T> {
    let mut out = base.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let mut acc = v.f64();
        for (g, a, b) in terms {
            acc += g * (a.data[i].f64() - b.data[i].f64());
        }
        *v = T::of(acc);
    }
    out
}

/// Runs the reverse process from `z_t_max` and returns the final latent.
pub fn sample_latent<T: Real, M: NoisePredictor<T>>(
    model: &M,
    schedule: &NoiseSchedule,
    z_t_max: Latent<T>,
    mr_latent: Option<&Latent<T>>,
    cond: &ConditionVector,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Latent<T>> {
    cfg.validate(schedule)?;
    let ts = schedule.inference_timesteps(cfg.num_steps)?;
    let ab = &schedule.alpha_bar;
    let mut z = z_t_max;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied();
        let eps = guided_noise(model, &z, t, mr_latent, cond, cfg.guidance_text, cfg.guidance_mr)?;
        let (sa, s1a) = (libm::sqrt(ab[t]), libm::sqrt(1.0 - ab[t]));
        let z0_hat: Vec<f64> = z.data.iter().zip(&eps.data).map(|(&x, &e)| (x.f64() - s1a * e.f64()) / sa).collect();
        match cfg.kind {
            SamplerKind::Deterministic => {
                let ab_prev = prev.map_or(1.0, |s| ab[s]);
                let (sp, s1p) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
                for ((v, &x0), &e) in z.data.iter_mut().zip(&z0_hat).zip(&eps.data) {
                    *v = T::of(sp * x0 + s1p * e.f64());
                }
            }
            SamplerKind::Ancestral => {
                let pc = schedule.posterior_between(t, prev);
                let mut rng = seed::rng(seed, "sample/ancestral", i as u64);
                for (v, &x0) in z.data.iter_mut().zip(&z0_hat) {
                    let noise: f64 = if prev.is_some() { rng.sample(StandardNormal) } else { 0.0 };
                    *v = T::of(pc.coef_z0 * x0 + pc.coef_zt * v.f64() + pc.sigma * noise);
                }
            }
        }
    }
    Ok(z)
}

/// Standard normal starting latent for `seed`. It depends on the seed alone,
/// so two prompts sampled with the same seed share their initial noise.
pub fn initial_noise<T: Real>(shape: [usize; 4], seed: u64) -> Latent<T> {
    let mut rng = seed::rng(seed, "sample/z_T", 0);
    let len = shape.iter().product();
    Tensor { shape, data: (0..len).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect() }
}

/// Generates one tau image, decoded and clipped to `[-1, 1]`.
pub fn generate<M: NoisePredictor<f32>>(
    model: &M,
    ae: &AutoencoderParams<f32>,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
) -> Result<Image2D> {
    req.prompt.validate()?;
    req.sampler.validate(schedule)?;
    let mr_latent = match (model.mr_conditioned(), &req.mr_image) {
        (true, Some(mr)) => Some(ae.encode(core::slice::from_ref(mr))?),
        (false, None) => None,
        (true, None) => return Err(Error::ConditioningMismatch("MR-conditioned model needs an MR image".into())),
        (false, Some(_)) => {
            return Err(Error::ConditioningMismatch("text-only model cannot take an MR image".into()))
        }
    };
    let z_max = initial_noise(ae.config.latent_shape(1), req.seed);
    let z0 = sample_latent(model, schedule, z_max, mr_latent.as_ref(), &embed(&req.prompt), &req.sampler, req.seed)?;
    let image = ae.decode(&z0, Modality::Tau)?.remove(0);
    Ok(image
        .with_meta("prompt", crate::prompt::format(&req.prompt))
        .with_meta("seed", req.seed.to_string())
        .with_meta("clip", "[-1, 1]"))
}

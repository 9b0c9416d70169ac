//! Linear-β noise schedule and the closed-form forward process.
//!
//! All schedule arithmetic is `f64`; only the final per-element coefficients
//! are cast to the tensor scalar type.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `alpha_bar[t] = ∏_{s ≤ t} (1 - beta[s])`.
    pub alpha_bar: Vec<f64>,
}

/// Reverse-step mean `coef_z0 · ẑ0 + coef_zt · z_t` and its noise scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_z0: f64,
    pub coef_zt: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    pub fn linear_beta(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_config(ScheduleConfig { steps, beta_start, beta_end })
    }

    pub fn from_config(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { steps, beta_start, beta_end } = config;
        if steps == 0 {
            return Err(Error::InvalidScheduleParams("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidScheduleParams(alloc::format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { config, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidTimestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps` with one timestep per batch entry.
    pub fn q_sample<T: Real>(&self, z0: &Tensor<T>, t: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
        z0.same_shape(eps)?;
        if t.len() != z0.n() {
            return Err(Error::shape(z0.n(), t.len()));
        }
        let mut out = Tensor::zeros(z0.shape);
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let ab = self.alpha_bar[ti];
            let (a, b) = (T::of(libm::sqrt(ab)), T::of(libm::sqrt(1.0 - ab)));
            for ((o, &x), &e) in out.sample_mut(i).iter_mut().zip(z0.sample(i)).zip(eps.sample(i)) {
                *o = a * x + b * e;
            }
        }
        Ok(out)
    }

    /// Single-timestep form of [`NoiseSchedule::q_sample`].
    pub fn q_sample_at<T: Real>(&self, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let ts = alloc::vec![t; z0.n()];
        self.q_sample(z0, &ts, eps)
    }

    /// Posterior `q(z_{t-1} | z_t, z_0)` of the forward chain.
    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        if t == 0 {
            return Err(Error::InvalidTimestep { t, steps: self.steps() });
        }
        self.check_t(t)?;
        Ok(self.posterior_between(t, Some(t - 1)))
    }

    /// Posterior of `z_s` given `z_t` and `z_0` for `s < t`; `None` means the
    /// clean endpoint (ᾱ = 1), where the mean is `ẑ0` and σ = 0.
    pub fn posterior_between(&self, t: usize, s: Option<usize>) -> PosteriorCoeffs {
        let ab_t = self.alpha_bar[t];
        let ab_s = s.map_or(1.0, |s| self.alpha_bar[s]);
        let a_ts = ab_t / ab_s;
        let one_m = 1.0 - ab_t;
        PosteriorCoeffs {
            coef_z0: libm::sqrt(ab_s) * (1.0 - a_ts) / one_m,
            coef_zt: libm::sqrt(a_ts) * (1.0 - ab_s) / one_m,
            sigma: libm::sqrt((1.0 - a_ts) * (1.0 - ab_s) / one_m),
        }
    }

    /// `n` evenly spaced timesteps from `T − 1` down to `0`.
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if n == 0 || n > big_t {
            return Err(Error::InvalidRequest(alloc::format!("num_steps {n} outside 1..={big_t}")));
        }
        if n == 1 {
            return Ok(alloc::vec![big_t - 1]);
        }
        Ok((0..n)
            .rev()
            .map(|i| libm::round(i as f64 * (big_t - 1) as f64 / (n - 1) as f64) as usize)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn interpolation_endpoints() {
        let s = NoiseSchedule::linear_beta(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta[0], 1e-4);
        assert!((s.beta[999] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[999] < 0.05);
        let p: f64 = s.alpha[..=10].iter().product();
        assert!((s.alpha_bar[10] - p).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear_beta(1, 0.3, 0.5).unwrap();
        assert_eq!(s.beta, vec![0.3]);
        assert_eq!(s.alpha_bar, vec![0.7]);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(NoiseSchedule::linear_beta(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear_beta(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear_beta(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear_beta(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_degenerate_inputs() {
        let s = NoiseSchedule::from_config(ScheduleConfig::default()).unwrap();
        let z0 = Tensor::<f64>::from_vec([1, 2, 1, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let zero = Tensor::<f64>::zeros(z0.shape);
        let eps = Tensor::<f64>::from_vec([1, 2, 1, 2], vec![1.0, -0.5, 0.1, 3.0]).unwrap();
        let t = 321;
        let a = s.alpha_bar[t].sqrt();
        let b = (1.0 - s.alpha_bar[t]).sqrt();
        let only_signal = s.q_sample_at(&z0, t, &zero).unwrap();
        assert_eq!(only_signal.data, z0.data.iter().map(|v| a * v).collect::<Vec<_>>());
        let only_noise = s.q_sample_at(&zero, t, &eps).unwrap();
        assert_eq!(only_noise.data, eps.data.iter().map(|v| b * v).collect::<Vec<_>>());
        assert!(s.q_sample_at(&z0, 1000, &eps).is_err());
        let wrong = Tensor::<f64>::zeros([1, 1, 1, 4]);
        assert!(matches!(s.q_sample_at(&z0, 3, &wrong), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn posterior_maps_noiseless_pair_to_previous_marginal() {
        let s = NoiseSchedule::from_config(ScheduleConfig::default()).unwrap();
        assert!(s.posterior_coeffs(0).is_err());
        assert!(s.posterior_coeffs(1000).is_err());
        let z0 = 0.8;
        for t in 1..1000 {
            let c = s.posterior_coeffs(t).unwrap();
            assert!(c.sigma > 0.0);
            let zt = s.alpha_bar[t].sqrt() * z0;
            let mean = c.coef_z0 * z0 + c.coef_zt * zt;
            assert!((mean - s.alpha_bar[t - 1].sqrt() * z0).abs() < 1e-10, "t={t}");
        }
    }

    /// Brute-force Bayes rule on a scalar grid: the posterior of `z_{t-1}`
    /// given `(z_t, z_0)` is proportional to `q(z_t | z_{t-1}) q(z_{t-1} | z_0)`;
    /// its mean and variance come from trapezoidal quadrature.
    fn quadrature_posterior(beta: &[f64], z0: f64, zt: f64) -> (f64, f64) {
        let ab_prev = 1.0 - beta[0];
        let a_t = 1.0 - beta[1];
        let logp = |x: f64| {
            let r1 = zt - a_t.sqrt() * x;
            let r2 = x - ab_prev.sqrt() * z0;
            -r1 * r1 / (2.0 * beta[1]) - r2 * r2 / (2.0 * (1.0 - ab_prev))
        };
        let (lo, hi, n) = (-3.0, 3.0, 120_000);
        let h = (hi - lo) / n as f64;
        let peak = (0..=n).map(|i| logp(lo + i as f64 * h)).fold(f64::MIN, f64::max);
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (logp(x) - peak).exp();
            m0 += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / m0;
        (mean, m2 / m0 - mean * mean)
    }

    #[test]
    fn two_step_posterior_matches_bayes_quadrature() {
        let s = NoiseSchedule::linear_beta(2, 0.1, 0.3).unwrap();
        let c = s.posterior_coeffs(1).unwrap();
        let (m_z0, var) = quadrature_posterior(&s.beta, 1.0, 0.0);
        let (m_zt, _) = quadrature_posterior(&s.beta, 0.0, 1.0);
        assert!((c.coef_z0 - m_z0).abs() < 1e-10, "{} vs {}", c.coef_z0, m_z0);
        assert!((c.coef_zt - m_zt).abs() < 1e-10, "{} vs {}", c.coef_zt, m_zt);
        assert!((c.sigma * c.sigma - var).abs() < 1e-10, "{} vs {}", c.sigma * c.sigma, var);
    }

    #[test]
    fn inference_timesteps_evenly_spaced() {
        let s = NoiseSchedule::from_config(ScheduleConfig::default()).unwrap();
        let ts = s.inference_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.inference_timesteps(1).unwrap(), vec![999]);
        assert_eq!(s.inference_timesteps(1000).unwrap().len(), 1000);
        assert!(s.inference_timesteps(0).is_err());
        assert!(s.inference_timesteps(1001).is_err());
    }
}

//! Analytic MR/tau phantom pairs.
//!
//! A phantom is a set of nested, angularly warped disks: skull ring, cortical
//! band, white matter, ventricles. Interior boundaries are one-pixel linear
//! ramps centred on the nominal radius; the outer skull edge ramps entirely
//! inside the brain disk so that the tau image is exactly the background value
//! outside the brain mask.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image2D, Mask, Modality};
use crate::prompt::{Amyloid, Gender, PromptSpec, Stage, MMSE_MAX};
use crate::seed;

const WARP_HARMONICS: core::ops::RangeInclusive<u32> = 2..=5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrIntensities {
    pub background: f64,
    pub skull: f64,
    pub cortex: f64,
    pub white_matter: f64,
    pub ventricle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauIntensities {
    pub background: f64,
    pub skull: f64,
    pub white_matter: f64,
    pub ventricle: f64,
}

/// Intensity model shared by the generator and the evaluation metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub resolution: usize,
    /// Cortical uptake at MMSE 30.
    pub u_min: f64,
    /// Cortical uptake at MMSE 0.
    pub u_max: f64,
    pub noise_sigma: f64,
    /// Amyloid-positive medial focus amplitude as a fraction of `u_max - u_min`.
    pub focus_fraction: f64,
    /// Early-stage uniform gray-matter offset added on top of the halved contrast.
    pub early_offset: f64,
    pub mr: MrIntensities,
    pub tau: TauIntensities,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            resolution: 64,
            u_min: -0.2,
            u_max: 0.8,
            noise_sigma: 0.02,
            focus_fraction: 0.3,
            early_offset: 0.15,
            mr: MrIntensities {
                background: -1.0,
                skull: 0.9,
                cortex: 0.1,
                white_matter: -0.35,
                ventricle: -0.8,
            },
            tau: TauIntensities { background: -1.0, skull: -0.4, white_matter: -0.5, ventricle: -0.65 },
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::InvalidConfig(alloc::format!(
                "phantom resolution {} must be a power of two >= 8",
                self.resolution
            )));
        }
        if !(self.u_min < self.u_max) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("need u_min < u_max and noise_sigma >= 0".into()));
        }
        Ok(())
    }

    /// Tau-scale cortical band value for a prompt, before noise.
    pub fn band_uptake(&self, spec: &PromptSpec) -> f64 {
        let impairment = (MMSE_MAX - spec.mmse.min(MMSE_MAX)) as f64 / MMSE_MAX as f64;
        let u = self.u_min + impairment * (self.u_max - self.u_min);
        match spec.stage {
            Stage::Later => u,
            Stage::Early => self.u_min + self.early_offset + 0.5 * (u - self.u_min),
        }
    }

    /// Tau threshold separating background from brain: midway between the
    /// background and white-matter intensities.
    pub fn brain_threshold(&self) -> f64 {
        0.5 * (self.tau.background + self.tau.white_matter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedialFocus {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

/// Subject anatomy. Lengths are in pixels; fractions are of `skull_radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomGeometry {
    pub center: (f64, f64),
    pub skull_radius: f64,
    pub cortex_band: (f64, f64),
    pub ventricle_radius_frac: f64,
    pub medial_focus: MedialFocus,
    /// Relative radial warp; 0 gives perfectly circular boundaries.
    pub warp_amplitude: f64,
    pub warp_seed: u64,
}

impl PhantomGeometry {
    pub fn validate(&self) -> Result<()> {
        let (inner, outer) = self.cortex_band;
        let bad = |msg: &str| Err(Error::InvalidGeometry(msg.into()));
        if !(self.skull_radius > 0.0 && self.skull_radius.is_finite()) {
            return bad("skull radius must be positive");
        }
        if !(0.0 < inner && inner < outer && outer <= 1.0) {
            return bad("need 0 < inner_frac < outer_frac <= 1");
        }
        if !(0.0 < self.ventricle_radius_frac && self.ventricle_radius_frac < inner) {
            return bad("need 0 < ventricle_radius_frac < inner_frac");
        }
        if !(0.0..0.5).contains(&self.warp_amplitude) {
            return bad("warp amplitude must lie in [0, 0.5)");
        }
        if !(self.medial_focus.radius > 0.0) || !self.center.0.is_finite() || !self.center.1.is_finite() {
            return bad("focus radius must be positive and center finite");
        }
        Ok(())
    }

    /// Draws a subject that fits inside a `resolution`-pixel field of view.
    pub fn sample(resolution: usize, rng: &mut ChaCha8Rng) -> Self {
        let res = resolution as f64;
        let jitter = 0.0625 * res;
        let center = (
            res / 2.0 + rng.gen_range(-jitter..=jitter),
            res / 2.0 + rng.gen_range(-jitter..=jitter),
        );
        let skull_radius = rng.gen_range(0.25..=0.40) * res;
        let inner = rng.gen_range(0.58..=0.68);
        let outer = rng.gen_range(0.80..=0.88);
        let ventricle = rng.gen_range(0.15..=0.28);
        let warp_amplitude = rng.gen_range(0.02..=0.08);
        let warp_seed = rng.gen::<u64>();
        // Medial focus sits in the cortical band near the inferior midline.
        let angle = PI / 2.0 + rng.gen_range(-0.35..=0.35);
        let rad = 0.5 * (inner + outer) * skull_radius;
        let medial_focus = MedialFocus {
            row: center.0 + rad * libm::sin(angle),
            col: center.1 + rad * libm::cos(angle),
            radius: rng.gen_range(0.09..=0.14) * skull_radius,
        };
        PhantomGeometry {
            center,
            skull_radius,
            cortex_band: (inner, outer),
            ventricle_radius_frac: ventricle,
            medial_focus,
            warp_amplitude,
            warp_seed,
        }
    }
}

/// Per-pixel nested-disk memberships for a geometry.
struct Layers {
    /// Brain disk (outer skull edge), ramped inside the boundary.
    brain: Vec<f64>,
    cortex_outer: Vec<f64>,
    cortex_inner: Vec<f64>,
    ventricle: Vec<f64>,
}

fn warp_coefficients(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = seed::rng(seed, "phantom/warp", 0);
    let norm: f64 = WARP_HARMONICS.map(|k| core::f64::consts::SQRT_2 / k as f64).sum();
    WARP_HARMONICS
        .map(|k| {
            let s = 1.0 / (k as f64 * norm);
            (rng.gen_range(-1.0..=1.0) * s, rng.gen_range(-1.0..=1.0) * s)
        })
        .collect()
}

fn layers(geom: &PhantomGeometry, resolution: usize) -> Result<Layers> {
    geom.validate()?;
    let coeffs = warp_coefficients(geom.warp_seed);
    let r = geom.skull_radius;
    let (inner, outer) = geom.cortex_band;
    let centred = |edge: f64, d: f64| (edge - d + 0.5).clamp(0.0, 1.0);
    let n = resolution * resolution;
    let mut out = Layers {
        brain: Vec::with_capacity(n),
        cortex_outer: Vec::with_capacity(n),
        cortex_inner: Vec::with_capacity(n),
        ventricle: Vec::with_capacity(n),
    };
    for row in 0..resolution {
        for col in 0..resolution {
            let dy = row as f64 + 0.5 - geom.center.0;
            let dx = col as f64 + 0.5 - geom.center.1;
            let dist = libm::sqrt(dx * dx + dy * dy);
            let scale = if geom.warp_amplitude == 0.0 {
                1.0
            } else {
                let theta = libm::atan2(dy, dx);
                let w: f64 = coeffs
                    .iter()
                    .zip(WARP_HARMONICS)
                    .map(|(&(a, b), k)| a * libm::cos(k as f64 * theta) + b * libm::sin(k as f64 * theta))
                    .sum();
                1.0 + geom.warp_amplitude * w
            };
            let d = dist / scale;
            out.brain.push((r - d).clamp(0.0, 1.0));
            out.cortex_outer.push(centred(outer * r, d));
            out.cortex_inner.push(centred(inner * r, d));
            out.ventricle.push(centred(geom.ventricle_radius_frac * r, d));
        }
    }
    Ok(out)
}

/// Exact at both ends: `lerp(a, b, 0) == a` and `lerp(a, b, 1) == b`.
#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a * (1.0 - w) + b * w
}

/// Noiseless MR anatomy: bright skull ring, mid-gray cortex, darker white
/// matter, dark ventricles.
pub fn make_anatomy(geom: &PhantomGeometry, cfg: &PhantomConfig) -> Result<Image2D> {
    cfg.validate()?;
    let l = layers(geom, cfg.resolution)?;
    let m = &cfg.mr;
    let px = (0..l.brain.len()).map(|i| {
        let wm = lerp(m.white_matter, m.ventricle, l.ventricle[i]);
        let cortex = lerp(m.cortex, wm, l.cortex_inner[i]);
        let skull = lerp(m.skull, cortex, l.cortex_outer[i]);
        lerp(m.background, skull, l.brain[i])
    });
    Image2D::clamped(cfg.resolution, px, Modality::Mr)
}

/// Tau uptake for a subject and prompt, with Gaussian texture noise drawn
/// from `noise_seed`.
pub fn make_uptake(geom: &PhantomGeometry, spec: &PromptSpec, noise_seed: u64, cfg: &PhantomConfig) -> Result<Image2D> {
    let clean = uptake_clean(geom, spec, cfg)?;
    let mut rng = seed::rng(noise_seed, "phantom/noise", 0);
    let px = clean.into_iter().map(|v| {
        if cfg.noise_sigma > 0.0 {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + cfg.noise_sigma * e
        } else {
            v
        }
    });
    Image2D::clamped(cfg.resolution, px, Modality::Tau)
}

/// Noise-free, unclipped tau values.
pub fn uptake_clean(geom: &PhantomGeometry, spec: &PromptSpec, cfg: &PhantomConfig) -> Result<Vec<f64>> {
    spec.validate()?;
    cfg.validate()?;
    let l = layers(geom, cfg.resolution)?;
    let t = &cfg.tau;
    let band = cfg.band_uptake(spec);
    let stage_gain = match spec.stage {
        Stage::Later => 1.0,
        Stage::Early => 0.5,
    };
    let focus_amp = match spec.amyloid {
        Some(Amyloid::Positive) => cfg.focus_fraction * (cfg.u_max - cfg.u_min) * stage_gain,
        _ => 0.0,
    };
    let f = geom.medial_focus;
    let n = cfg.resolution;
    Ok((0..l.brain.len())
        .map(|i| {
            let wm = lerp(t.white_matter, t.ventricle, l.ventricle[i]);
            let cortex = lerp(band, wm, l.cortex_inner[i]);
            let skull = lerp(t.skull, cortex, l.cortex_outer[i]);
            let mut v = lerp(t.background, skull, l.brain[i]);
            if focus_amp != 0.0 && l.brain[i] > 0.0 {
                let dy = (i / n) as f64 + 0.5 - f.row;
                let dx = (i % n) as f64 + 0.5 - f.col;
                v += focus_amp * l.brain[i] * libm::exp(-(dx * dx + dy * dy) / (2.0 * f.radius * f.radius));
            }
            v
        })
        .collect())
}

/// Region masks derived from a geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMasks {
    pub cortical: Mask,
    pub brain: Mask,
    /// Complement of the brain mask dilated by two pixels.
    pub background: Mask,
}

pub fn roi_masks(geom: &PhantomGeometry, resolution: usize) -> Result<RoiMasks> {
    let l = layers(geom, resolution)?;
    let brain = Mask { size: resolution, bits: l.brain.iter().map(|&b| b > 0.0).collect() };
    let cortical = Mask {
        size: resolution,
        bits: (0..l.brain.len())
            .map(|i| brain.bits[i] && l.cortex_outer[i] - l.cortex_inner[i] >= 0.5)
            .collect(),
    };
    let background = brain.dilate(2).complement();
    Ok(RoiMasks { cortical, brain, background })
}

/// One corpus entry before anything touches the filesystem.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryPlan {
    pub index: usize,
    pub prompt: PromptSpec,
    pub geometry: PhantomGeometry,
    /// Noise seed for [`make_uptake`].
    pub seed: u64,
}

/// Number of trailing entries held out for evaluation: 19 of 139, scaled
/// proportionally (rounded) for other corpus sizes.
pub fn default_holdout(n: usize) -> usize {
    (n * 19 + 69) / 139
}

/// Draws prompts and anatomies for `n` subjects.
///
/// MMSE is stratified: every block of ten entries visits each score decile
/// (`[0,3) … [27,30]`) once in shuffled order. Stage is early/later with equal
/// probability; amyloid and gender are each absent, or one of their two
/// values, with probability 1/3.
pub fn plan_corpus(n: usize, corpus_seed: u64, resolution: usize) -> Vec<EntryPlan> {
    let mut deciles: Vec<u8> = Vec::new();
    (0..n)
        .map(|i| {
            if i % 10 == 0 {
                let mut rng = seed::rng(corpus_seed, "corpus/deciles", (i / 10) as u64);
                deciles = (0..10).collect();
                for j in (1..deciles.len()).rev() {
                    deciles.swap(j, rng.gen_range(0..=j));
                }
            }
            let mut rng = seed::rng(corpus_seed, "corpus/entry", i as u64);
            let d = deciles[i % 10];
            let mmse = if d == 9 { rng.gen_range(27..=30) } else { rng.gen_range(3 * d..3 * d + 3) };
            let stage = if rng.gen_bool(0.5) { Stage::Later } else { Stage::Early };
            let amyloid = match rng.gen_range(0..3) {
                0 => None,
                1 => Some(Amyloid::Positive),
                _ => Some(Amyloid::Negative),
            };
            let gender = match rng.gen_range(0..3) {
                0 => None,
                1 => Some(Gender::Male),
                _ => Some(Gender::Female),
            };
            let geometry = PhantomGeometry::sample(resolution, &mut rng);
            EntryPlan {
                index: i,
                prompt: PromptSpec { stage, mmse, gender, amyloid },
                geometry,
                seed: rng.gen(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn round_geom(res: usize) -> PhantomGeometry {
        let c = res as f64 / 2.0;
        PhantomGeometry {
            center: (c, c),
            skull_radius: 0.35 * res as f64,
            cortex_band: (0.62, 0.85),
            ventricle_radius_frac: 0.2,
            medial_focus: MedialFocus { row: c + 0.2 * res as f64, col: c, radius: 3.0 },
            warp_amplitude: 0.0,
            warp_seed: 11,
        }
    }

    fn quiet() -> PhantomConfig {
        PhantomConfig { noise_sigma: 0.0, ..PhantomConfig::default() }
    }

    #[test]
    fn anatomy_is_deterministic_and_centred() {
        let cfg = PhantomConfig::default();
        let g = round_geom(64);
        let a = make_anatomy(&g, &cfg).unwrap();
        assert_eq!(a, make_anatomy(&g, &cfg).unwrap());
        assert_eq!(a.at(32, 32) as f64, cfg.mr.ventricle as f32 as f64);
        assert_eq!(a.at(0, 0) as f64, cfg.mr.background);
    }

    #[test]
    fn unwarped_rings_are_circular() {
        let cfg = PhantomConfig::default();
        let g = round_geom(64);
        let a = make_anatomy(&g, &cfg).unwrap();
        // Pixels at equal distance from the centre along the four axes agree.
        for k in 0..30 {
            let v = a.at(32, 32 + k);
            assert_eq!(v, a.at(32, 31 - k));
            assert_eq!(v, a.at(32 + k, 32));
            assert_eq!(v, a.at(31 - k, 32));
        }
    }

    #[test]
    fn unwarped_brain_area_matches_disk() {
        let cfg = PhantomConfig::default();
        let g = round_geom(64);
        let a = make_anatomy(&g, &cfg).unwrap();
        let thr = 0.5 * (cfg.mr.background + cfg.mr.ventricle) as f32;
        let area = a.pixels().iter().filter(|&&v| v > thr).count() as f64;
        let disk = PI * g.skull_radius * g.skull_radius;
        assert!((area / disk - 1.0).abs() < 0.05, "area {area} vs {disk}");
    }

    #[test]
    fn invalid_geometry_rejected() {
        let cfg = PhantomConfig::default();
        let mut g = round_geom(64);
        g.cortex_band = (0.9, 0.8);
        assert!(matches!(make_anatomy(&g, &cfg), Err(Error::InvalidGeometry(_))));
        let mut g = round_geom(64);
        g.ventricle_radius_frac = 0.7;
        assert!(matches!(roi_masks(&g, 64), Err(Error::InvalidGeometry(_))));
        let mut g = round_geom(64);
        g.cortex_band = (0.5, 1.2);
        assert!(g.validate().is_err());
    }

    fn band_pixel(g: &PhantomGeometry) -> usize {
        // A pixel on the superior midline in the middle of the band.
        let d = 0.5 * (g.cortex_band.0 + g.cortex_band.1) * g.skull_radius;
        let row = (g.center.0 - d) as usize;
        row * 64 + g.center.1 as usize
    }

    #[test]
    fn band_uptake_boundaries() {
        let cfg = quiet();
        let g = round_geom(64);
        let mut spec = PromptSpec::later(30).unwrap();
        spec.amyloid = Some(Amyloid::Negative);
        let v = uptake_clean(&g, &spec, &cfg).unwrap();
        assert_eq!(v[band_pixel(&g)], cfg.u_min);
        let v = uptake_clean(&g, &PromptSpec::later(0).unwrap(), &cfg).unwrap();
        assert_eq!(v[band_pixel(&g)], cfg.u_max);
        let v = uptake_clean(&g, &PromptSpec::later(13).unwrap(), &cfg).unwrap();
        let expected = cfg.u_min + 17.0 / 30.0 * (cfg.u_max - cfg.u_min);
        assert!((v[band_pixel(&g)] - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_mmse_rejected() {
        let spec = PromptSpec { stage: Stage::Later, mmse: 31, gender: None, amyloid: None };
        assert!(matches!(make_uptake(&round_geom(64), &spec, 1, &quiet()), Err(Error::InvalidPrompt(_))));
    }

    #[test]
    fn uptake_outside_brain_is_background() {
        let cfg = quiet();
        let mut rng = seed::rng(3, "test", 0);
        for _ in 0..5 {
            let g = PhantomGeometry::sample(64, &mut rng);
            let masks = roi_masks(&g, 64).unwrap();
            let mut spec = PromptSpec::later(4).unwrap();
            spec.amyloid = Some(Amyloid::Positive);
            let v = uptake_clean(&g, &spec, &cfg).unwrap();
            for (i, inside) in masks.brain.bits.iter().enumerate() {
                if !inside {
                    assert_eq!(v[i], cfg.tau.background);
                }
            }
        }
    }

    #[test]
    fn amyloid_focus_raises_uptake_and_early_flattens() {
        let cfg = quiet();
        let g = round_geom(64);
        let masks = roi_masks(&g, 64).unwrap();
        let mean = |spec: &PromptSpec| {
            let img = make_uptake(&g, spec, 0, &cfg).unwrap();
            let (s, n) = img
                .pixels()
                .iter()
                .zip(&masks.cortical.bits)
                .filter(|(_, m)| **m)
                .fold((0.0, 0), |(s, n), (v, _)| (s + *v as f64, n + 1));
            s / n as f64
        };
        let neg = PromptSpec { amyloid: Some(Amyloid::Negative), ..PromptSpec::later(20).unwrap() };
        let pos = PromptSpec { amyloid: Some(Amyloid::Positive), ..neg };
        assert!(mean(&pos) > mean(&neg));
        let spread = |stage| {
            let hi = PromptSpec { stage, ..PromptSpec::later(0).unwrap() };
            let lo = PromptSpec { stage, ..PromptSpec::later(30).unwrap() };
            mean(&hi) - mean(&lo)
        };
        let ratio = spread(Stage::Early) / spread(Stage::Later);
        assert!((ratio - 0.5).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = PhantomConfig::default();
        let g = round_geom(64);
        let s = PromptSpec::later(10).unwrap();
        assert_eq!(make_uptake(&g, &s, 5, &cfg).unwrap(), make_uptake(&g, &s, 5, &cfg).unwrap());
        assert_ne!(make_uptake(&g, &s, 5, &cfg).unwrap(), make_uptake(&g, &s, 6, &cfg).unwrap());
    }

    #[test]
    fn masks_are_consistent() {
        let g = round_geom(64);
        let m = roi_masks(&g, 64).unwrap();
        assert_eq!(m, roi_masks(&g, 64).unwrap());
        assert!(m.cortical.is_subset_of(&m.brain));
        assert_eq!(m.cortical.intersection_count(&m.background), 0);
        let (i, o) = g.cortex_band;
        let annulus = PI * g.skull_radius * g.skull_radius * (o * o - i * i);
        let area = m.cortical.count() as f64;
        assert!((area / annulus - 1.0).abs() < 0.05, "{area} vs {annulus}");
    }

    #[test]
    fn corpus_plan_covers_every_decile() {
        let plan = plan_corpus(139, 7, 64);
        assert_eq!(plan, plan_corpus(139, 7, 64));
        let mut hist = vec![0usize; 10];
        for e in &plan {
            hist[(e.prompt.mmse as usize / 3).min(9)] += 1;
            e.geometry.validate().unwrap();
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
        assert!(plan_corpus(0, 7, 64).is_empty());
        assert_eq!(default_holdout(139), 19);
    }

    #[test]
    fn sampled_geometry_fits_field_of_view() {
        let mut rng = seed::rng(1, "fov", 0);
        for _ in 0..200 {
            let g = PhantomGeometry::sample(64, &mut rng);
            let reach = g.skull_radius * (1.0 + g.warp_amplitude);
            assert!(g.center.0 - reach > 0.0 && g.center.0 + reach < 64.0);
            assert!(g.center.1 - reach > 0.0 && g.center.1 + reach < 64.0);
        }
    }
}

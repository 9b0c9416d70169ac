//! Metrics for MMSE-dependent uptake and MR-driven anatomy preservation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderParams;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::{Image2D, Mask};
use crate::phantom::{make_anatomy, make_uptake, roi_masks, EntryPlan, PhantomConfig, PhantomGeometry, RoiMasks};
use crate::prompt::{format, PromptSpec};
use crate::sampler::{generate, SampleRequest, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::seed;

pub const DEFAULT_MMSE_LIST: [u8; 4] = [30, 25, 20, 13];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub spearman_rho: f64,
    pub win_rate: f64,
    /// Required MR-model Dice minus text-only Dice.
    pub dice_gain: f64,
    /// Allowed |matched − shuffled| Dice gap of the text-only model.
    pub shuffle_gap: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { spearman_rho: 0.8, win_rate: 0.8, dice_gain: 0.1, shuffle_gap: 0.05 }
    }
}

/// Mean over the mask, mapped from `[-1, 1]` to `[0, 1]`.
pub fn cortical_uptake(img: &Image2D, mask: &Mask) -> Result<f64> {
    if mask.size != img.size() {
        return Err(Error::shape(img.size(), mask.size));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = img.pixels().iter().zip(&mask.bits).filter(|(_, &b)| b).map(|(&p, _)| p as f64).sum();
    Ok((sum / n as f64 + 1.0) / 2.0)
}

pub fn threshold_mask(img: &Image2D, threshold: f64) -> Mask {
    Mask { size: img.size(), bits: img.pixels().iter().map(|&p| p as f64 > threshold).collect() }
}

/// `2|A∩B| / (|A|+|B|)`, or 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.size != b.size {
        return Err(Error::shape(a.size, b.size));
    }
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / total as f64)
}

/// Dice between the thresholded generated image and a reference brain mask.
pub fn anatomy_dice(gen: &Image2D, ref_brain: &Mask, threshold: f64) -> Result<f64> {
    if gen.size() != ref_brain.size {
        return Err(Error::shape(ref_brain.size, gen.size()));
    }
    dice(&threshold_mask(gen, threshold), ref_brain)
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(img: &Image2D) -> Vec<f64> {
    let s = img.size() as isize;
    let px = |r: isize, c: isize| img.at(r.clamp(0, s - 1) as usize, c.clamp(0, s - 1) as usize) as f64;
    let mut out = Vec::with_capacity((s * s) as usize);
    for r in 0..s {
        for c in 0..s {
            let gx = px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1)
                - px(r - 1, c - 1)
                - 2.0 * px(r, c - 1)
                - px(r + 1, c - 1);
            let gy = px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1)
                - px(r - 1, c - 1)
                - 2.0 * px(r - 1, c)
                - px(r - 1, c + 1);
            out.push(libm::sqrt(gx * gx + gy * gy));
        }
    }
    out
}

/// Pearson correlation of Sobel magnitudes.
pub fn edge_correlation(a: &Image2D, b: &Image2D) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::shape(a.size(), b.size()));
    }
    pearson(&sobel_magnitude(a), &sobel_magnitude(b))
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    pearson(&ranks(x), &ranks(y))
}

/// A held-out corpus entry with everything the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub index: usize,
    pub prompt: PromptSpec,
    pub geometry: PhantomGeometry,
    pub mr: Image2D,
    pub masks: RoiMasks,
}

impl Subject {
    pub fn from_plan(plan: &EntryPlan, cfg: &PhantomConfig) -> Result<Self> {
        Ok(Subject {
            index: plan.index,
            prompt: plan.prompt,
            geometry: plan.geometry,
            mr: make_anatomy(&plan.geometry, cfg)?,
            masks: roi_masks(&plan.geometry, cfg.resolution)?,
        })
    }
}

/// Anything that turns (subject, prompt, seed) into a tau image.
pub trait TauResponder {
    fn respond(&self, subject: &Subject, prompt: &PromptSpec, seed: u64) -> Result<Image2D>;
}

/// The phantom generator itself; an upper bound for every metric.
#[derive(Clone, Debug)]
pub struct PhantomResponder {
    pub config: PhantomConfig,
}

impl TauResponder for PhantomResponder {
    fn respond(&self, subject: &Subject, prompt: &PromptSpec, seed: u64) -> Result<Image2D> {
        make_uptake(&subject.geometry, prompt, seed, &self.config)
    }
}

/// A denoiser sampled through the autoencoder. MR-conditioned models receive
/// the subject's MR.
pub struct ModelResponder<'a, M> {
    pub model: &'a M,
    pub autoencoder: &'a AutoencoderParams<f32>,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
}

impl<M: NoisePredictor<f32>> TauResponder for ModelResponder<'_, M> {
    fn respond(&self, subject: &Subject, prompt: &PromptSpec, seed: u64) -> Result<Image2D> {
        let mr = self.model.mr_conditioned().then(|| subject.mr.clone());
        let req = SampleRequest { prompt: *prompt, mr_image: mr, sampler: self.sampler, seed };
        generate(self.model, self.autoencoder, self.schedule, &req)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Which model produced the image (`"model"`, `"text"`, `"mr"`).
    pub model: String,
    pub sweep: usize,
    pub subject: usize,
    /// Subject whose masks and MR the metrics were scored against.
    pub reference: usize,
    pub seed: u64,
    pub prompt: String,
    pub mmse: u8,
    pub cortical_uptake: f64,
    pub anatomy_dice: f64,
    pub edge_corr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `">="` or `"<"`.
    pub relation: String,
    pub passed: bool,
}

impl Check {
    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Check { name: name.into(), value, threshold, relation: ">=".into(), passed: value >= threshold }
    }

    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Check { name: name.into(), value, threshold, relation: "<".into(), passed: value < threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mmse_list: Vec<u8>,
    pub mean_uptake: Vec<f64>,
    /// Mean over sweeps of the within-sweep Spearman correlation between
    /// `30 − MMSE` and uptake.
    pub spearman_rho: f64,
    /// Spearman correlation over all records at once.
    pub pooled_spearman_rho: f64,
    /// Fraction of sweeps where the lowest MMSE out-uptakes the highest.
    pub win_rate: f64,
    pub sweeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub dice_mr: f64,
    pub dice_text: f64,
    /// Text-only images scored against another subject's brain mask.
    pub dice_text_shuffled: f64,
    pub edge_corr_mr: f64,
    pub edge_corr_text: f64,
    pub subjects: usize,
    pub seeds_per_subject: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub records: Vec<SampleRecord>,
    pub sweep: Option<SweepSummary>,
    pub ablation: Option<AblationSummary>,
    pub checks: Vec<Check>,
}

impl EvalReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mmse_list: Vec<u8>,
    /// Paired MMSE sweeps; sweep `i` uses held-out subject `i mod n`.
    pub sweeps: usize,
    pub ablation_seeds: usize,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mmse_list: DEFAULT_MMSE_LIST.to_vec(), sweeps: 50, ablation_seeds: 2, thresholds: Thresholds::default() }
    }
}

fn score(
    model: &str,
    img: &Image2D,
    reference: &Subject,
    ctx: (usize, usize, u64, &PromptSpec),
    threshold: f64,
) -> Result<SampleRecord> {
    let (sweep, subject, seed, prompt) = ctx;
    Ok(SampleRecord {
        model: model.into(),
        sweep,
        subject,
        reference: reference.index,
        seed,
        prompt: format(prompt),
        mmse: prompt.mmse,
        cortical_uptake: cortical_uptake(img, &reference.masks.cortical)?,
        anatomy_dice: anatomy_dice(img, &reference.masks.brain, threshold)?,
        edge_corr: edge_correlation(img, &reference.mr)?,
    })
}

/// Generates every MMSE in the list for each paired sweep. Sweep `i` uses
/// subject `i mod len` and one seed shared by all of its MMSE values.
pub fn mmse_sweep(
    responder: &dyn TauResponder,
    subjects: &[Subject],
    cfg: &EvalConfig,
    phantom: &PhantomConfig,
    root_seed: u64,
) -> Result<EvalReport> {
    if subjects.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.mmse_list.len() < 2 || cfg.sweeps == 0 {
        return Err(Error::InvalidConfig("sweep needs at least two MMSE values and one sweep".into()));
    }
    let threshold = phantom.brain_threshold();
    let mut records = Vec::with_capacity(cfg.sweeps * cfg.mmse_list.len());
    for i in 0..cfg.sweeps {
        let subject = &subjects[i % subjects.len()];
        let s = seed::derive_seed(root_seed, "eval/sweep", i as u64);
        for &mmse in &cfg.mmse_list {
            let prompt = PromptSpec::later(mmse)?;
            let img = responder.respond(subject, &prompt, s)?;
            records.push(score("model", &img, subject, (i, subject.index, s, &prompt), threshold)?);
        }
    }
    let summary = summarize_sweep(&records, &cfg.mmse_list)?;
    let checks = vec![
        Check::at_least("spearman_rho", summary.spearman_rho, cfg.thresholds.spearman_rho),
        Check::at_least("win_rate", summary.win_rate, cfg.thresholds.win_rate),
    ];
    Ok(EvalReport { kind: "mmse_sweep".into(), config: BTreeMap::new(), records, sweep: Some(summary), ablation: None, checks })
}

/// Recomputes the sweep aggregates from its records.
pub fn summarize_sweep(records: &[SampleRecord], mmse_list: &[u8]) -> Result<SweepSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut by_sweep: BTreeMap<usize, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        by_sweep.entry(r.sweep).or_default().push(r);
    }
    let burden = |r: &SampleRecord| 30.0 - r.mmse as f64;
    let (lo, hi) = (*mmse_list.iter().min().unwrap_or(&0), *mmse_list.iter().max().unwrap_or(&30));
    let mut rho_sum = 0.0;
    let mut wins = 0usize;
    for rs in by_sweep.values() {
        let x: Vec<f64> = rs.iter().map(|r| burden(r)).collect();
        let y: Vec<f64> = rs.iter().map(|r| r.cortical_uptake).collect();
        rho_sum += spearman(&x, &y)?;
        let at = |m: u8| rs.iter().find(|r| r.mmse == m).map(|r| r.cortical_uptake);
        if let (Some(a), Some(b)) = (at(lo), at(hi)) {
            wins += (a > b) as usize;
        }
    }
    let x: Vec<f64> = records.iter().map(burden).collect();
    let y: Vec<f64> = records.iter().map(|r| r.cortical_uptake).collect();
    let mean_uptake = mmse_list
        .iter()
        .map(|&m| {
            let v: Vec<f64> = records.iter().filter(|r| r.mmse == m).map(|r| r.cortical_uptake).collect();
            if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
        })
        .collect();
    let n = by_sweep.len();
    Ok(SweepSummary {
        mmse_list: mmse_list.to_vec(),
        mean_uptake,
        spearman_rho: rho_sum / n as f64,
        pooled_spearman_rho: spearman(&x, &y)?,
        win_rate: wins as f64 / n as f64,
        sweeps: n,
    })
}

/// Scores a text-only and an MR-conditioned responder on the same subjects
/// and seeds, each subject prompted with its own corpus prompt. Text-only
/// images are also scored against the next subject's anatomy.
pub fn ablation_report(
    text: &dyn TauResponder,
    mr: &dyn TauResponder,
    subjects: &[Subject],
    cfg: &EvalConfig,
    phantom: &PhantomConfig,
    root_seed: u64,
) -> Result<EvalReport> {
    let seeds_per_subject = cfg.ablation_seeds;
    if subjects.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if seeds_per_subject == 0 {
        return Err(Error::InvalidConfig("ablation needs at least one seed per subject".into()));
    }
    let threshold = phantom.brain_threshold();
    let mut records = Vec::new();
    for (si, subject) in subjects.iter().enumerate() {
        let other = &subjects[(si + 1) % subjects.len()];
        for k in 0..seeds_per_subject {
            let run = si * seeds_per_subject + k;
            let s = seed::derive_seed(root_seed, "eval/ablation", run as u64);
            let ctx = (run, subject.index, s, &subject.prompt);
            let t_img = text.respond(subject, &subject.prompt, s)?;
            records.push(score("text", &t_img, subject, ctx, threshold)?);
            records.push(score("text", &t_img, other, ctx, threshold)?);
            let m_img = mr.respond(subject, &subject.prompt, s)?;
            records.push(score("mr", &m_img, subject, ctx, threshold)?);
        }
    }
    let summary = summarize_ablation(&records, seeds_per_subject)?;
    let checks = vec![
        Check::at_least("dice_gain", summary.dice_mr - summary.dice_text, cfg.thresholds.dice_gain),
        Check::below("text_shuffle_gap", (summary.dice_text - summary.dice_text_shuffled).abs(), cfg.thresholds.shuffle_gap),
    ];
    Ok(EvalReport { kind: "ablation".into(), config: BTreeMap::new(), records, sweep: None, ablation: Some(summary), checks })
}

/// Recomputes the ablation aggregates from its records.
pub fn summarize_ablation(records: &[SampleRecord], seeds_per_subject: usize) -> Result<AblationSummary> {
    let mean = |keep: &dyn Fn(&SampleRecord) -> bool, f: &dyn Fn(&SampleRecord) -> f64| -> Result<f64> {
        let v: Vec<f64> = records.iter().filter(|r| keep(r)).map(f).collect();
        if v.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let matched = |m: &'static str| move |r: &SampleRecord| r.model == m && r.reference == r.subject;
    let dice = |r: &SampleRecord| r.anatomy_dice;
    let edge = |r: &SampleRecord| r.edge_corr;
    let mut subjects: Vec<usize> = records.iter().map(|r| r.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    Ok(AblationSummary {
        dice_mr: mean(&matched("mr"), &dice)?,
        dice_text: mean(&matched("text"), &dice)?,
        dice_text_shuffled: mean(&|r: &SampleRecord| r.model == "text" && r.reference != r.subject, &dice)?,
        edge_corr_mr: mean(&matched("mr"), &edge)?,
        edge_corr_text: mean(&matched("text"), &edge)?,
        subjects: subjects.len(),
        seeds_per_subject,
    })
}

//! Command implementations. Each takes the merged run config and writes only
//! under its output path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taugen_core::autoencoder::{reconstruction_psnr, train_autoencoder, AutoencoderMode, AutoencoderParams};
use taugen_core::denoiser::{init_denoiser, DenoiserConfig, DenoiserParams};
use taugen_core::eval::{ablation_report, cortical_uptake, mmse_sweep, EvalReport, ModelResponder, PhantomResponder, Subject, TauResponder};
use taugen_core::image::Mask;
use taugen_core::phantom::roi_masks;
use taugen_core::prompt::{embed, format, parse};
use taugen_core::sampler::{generate, SampleRequest, SamplerConfig};
use taugen_core::tensor::Latent;
use taugen_core::trainer::{smoothed, LatentDataset, TrainState};
use taugen_core::{Error, Image2D, Modality, NoiseSchedule, PromptSpec};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::corpus::{generate_corpus, hex, Corpus, CorpusManifest};
use crate::error::{AppError, AppResult};
use crate::fsutil::{write_atomic, write_json};
use crate::{pngio, report};

pub const CONFIG_FILE: &str = "config.json";
pub const AE_CHECKPOINT: &str = "autoencoder.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Text,
    #[value(name = "text_mr")]
    TextMr,
}

impl Mode {
    pub fn mr_conditioned(self) -> bool {
        self == Mode::TextMr
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.ckpt")
}

pub fn sha256_file(path: &Path) -> AppResult<String> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// `img.png` → `img.<ext>`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn load_corpus(cfg: &RunConfig) -> AppResult<Corpus> {
    let corpus = Corpus::load(cfg.corpus_dir()?)?;
    if corpus.manifest.resolution != cfg.phantom.resolution {
        return Err(AppError::Config(format!(
            "corpus resolution {} differs from phantom.resolution {}",
            corpus.manifest.resolution, cfg.phantom.resolution
        )));
    }
    Ok(corpus)
}

fn check_fingerprint(what: &str, found: &str, corpus: &Corpus) -> AppResult<()> {
    let expected = corpus.fingerprint();
    if found != expected {
        return Err(AppError::Fingerprint(format!("{what} was trained on corpus {found}, not {expected}")));
    }
    Ok(())
}

pub fn cmd_corpus(cfg: &RunConfig, out: &Path) -> AppResult<CorpusManifest> {
    cfg.phantom.validate()?;
    let manifest = generate_corpus(out, cfg.corpus.n, cfg.corpus.seed, &cfg.phantom)?;
    cfg.archive(&out.join(CONFIG_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub holdout_psnr_mr: f64,
    pub holdout_psnr_tau: f64,
}

fn write_loss_csv(path: &Path, losses: &[f64], window: usize) -> AppResult<()> {
    let mut s = String::from("step,raw_loss,smoothed_loss\n");
    for (i, (raw, sm)) in losses.iter().zip(smoothed(losses, window)).enumerate() {
        s.push_str(&format!("{},{raw},{sm}\n", i + 1));
    }
    write_atomic(path, s.as_bytes())
}

/// Trains the autoencoder on the MR and tau images of the training split.
pub fn train_ae(cfg: &RunConfig, out: &Path) -> AppResult<(PathBuf, AutoencoderSummary)> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    cfg.archive(&out.join(CONFIG_FILE))?;
    let mut images = Vec::new();
    for i in corpus.manifest.train_range() {
        images.push(corpus.mr(i)?);
        images.push(corpus.tau(i)?);
    }
    let (ae, losses) =
        train_autoencoder(&images, &cfg.autoencoder, &cfg.autoencoder_training, cfg.derived_seed("autoencoder"), |_, _| {})?;
    let (mut mr, mut tau) = (Vec::new(), Vec::new());
    for i in corpus.manifest.holdout_range() {
        mr.push(corpus.mr(i)?);
        tau.push(corpus.tau(i)?);
    }
    let psnr = |v: &[Image2D]| if v.is_empty() { Ok(f64::NAN) } else { reconstruction_psnr(&ae, v) };
    let summary = AutoencoderSummary {
        steps: losses.len() as u64,
        final_loss: losses.last().copied(),
        holdout_psnr_mr: psnr(&mr)?,
        holdout_psnr_tau: psnr(&tau)?,
    };
    let ckpt = Checkpoint {
        step: losses.len() as u64,
        fingerprint: corpus.fingerprint(),
        seed: cfg.seed,
        schedule: cfg.schedule,
        autoencoder: ae,
        denoiser: None,
        train: None,
        optimizer: None,
        losses,
    };
    let path = out.join(AE_CHECKPOINT);
    ckpt.save(&path)?;
    write_loss_csv(&out.join("autoencoder_loss.csv"), &ckpt.losses, cfg.training.smoothing_window)?;
    write_json(&out.join("autoencoder_summary.json"), &summary)?;
    Ok((path, summary))
}

/// The autoencoder the denoiser runs in: fixed in identity mode, otherwise
/// read from `paths.autoencoder` and checked against the corpus.
pub fn load_autoencoder(cfg: &RunConfig, corpus: &Corpus) -> AppResult<AutoencoderParams<f32>> {
    if cfg.autoencoder.mode == AutoencoderMode::Identity {
        return Ok(AutoencoderParams::init(&cfg.autoencoder, cfg.derived_seed("autoencoder"))?);
    }
    let path = cfg
        .paths
        .autoencoder
        .as_deref()
        .ok_or_else(|| AppError::Config("paths.autoencoder is required for a learned autoencoder".into()))?;
    let ckpt = Checkpoint::load(path)?;
    check_fingerprint("autoencoder checkpoint", &ckpt.fingerprint, corpus)?;
    if ckpt.autoencoder.config != cfg.autoencoder {
        return Err(AppError::Config("autoencoder checkpoint config differs from the run config".into()));
    }
    Ok(ckpt.autoencoder)
}

/// Encodes the training split into latents and prompt embeddings.
pub fn latent_dataset(corpus: &Corpus, ae: &AutoencoderParams<f32>, with_mr: bool) -> AppResult<LatentDataset> {
    let range = corpus.manifest.train_range();
    let mut tau = Vec::new();
    let mut mr = Vec::new();
    let mut conditions = Vec::new();
    for i in range {
        tau.push(corpus.tau(i)?);
        if with_mr {
            mr.push(corpus.mr(i)?);
        }
        conditions.push(embed(&corpus.prompt(i)?));
    }
    if tau.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let encode = |imgs: &[Image2D]| -> AppResult<Latent<f32>> { Ok(ae.encode(imgs)?) };
    let mr = if with_mr { Some(encode(&mr)?) } else { None };
    Ok(LatentDataset::new(encode(&tau)?, mr, conditions)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Divergence {
    step: u64,
    loss: f64,
    recent_losses: Vec<f64>,
}

pub fn denoiser_config(cfg: &RunConfig, mode: Mode) -> DenoiserConfig {
    DenoiserConfig { mr_conditioned: mode.mr_conditioned(), ..cfg.denoiser.clone() }
}

/// Trains the latent denoiser, checkpointing every `checkpoint_every` steps and
/// at the end. Returns the final checkpoint path.
pub fn train_ldm(cfg: &RunConfig, mode: Mode, out: &Path, resume: Option<&Path>) -> AppResult<PathBuf> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let ae = load_autoencoder(cfg, &corpus)?;
    let dcfg = denoiser_config(cfg, mode);
    let seed = cfg.derived_seed("train");
    let mut state = match resume {
        None => TrainState::new(init_denoiser(&dcfg, cfg.derived_seed("denoiser/init"))?, &cfg.training, seed),
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_fingerprint("resume checkpoint", &ckpt.fingerprint, &corpus)?;
            let state = ckpt
                .train_state()
                .ok_or_else(|| AppError::Checkpoint("resume checkpoint holds no denoiser state".into()))?;
            if state.model.config != dcfg || state.seed != seed {
                return Err(AppError::Config("resume checkpoint was trained with a different denoiser config or seed".into()));
            }
            if ckpt.autoencoder.params != ae.params {
                return Err(AppError::Config("resume checkpoint used a different autoencoder".into()));
            }
            if state.step > cfg.training.steps {
                return Err(AppError::Config(format!(
                    "resume checkpoint is at step {} beyond training.steps {}",
                    state.step, cfg.training.steps
                )));
            }
            state
        }
    };
    let data = latent_dataset(&corpus, &ae, mode.mr_conditioned())?;
    let schedule = NoiseSchedule::from_config(cfg.schedule)?;
    cfg.archive(&out.join(CONFIG_FILE))?;
    let fingerprint = corpus.fingerprint();
    let save = |state: &TrainState| -> AppResult<PathBuf> {
        let ckpt = Checkpoint {
            step: state.step,
            fingerprint: fingerprint.clone(),
            seed: state.seed,
            schedule: cfg.schedule,
            autoencoder: ae.clone(),
            denoiser: Some(state.model.clone()),
            train: Some(cfg.training.clone()),
            optimizer: Some(state.optimizer.clone()),
            losses: state.losses.clone(),
        };
        let path = out.join(checkpoint_name(state.step));
        ckpt.save(&path)?;
        write_loss_csv(&out.join(LOSS_FILE), &state.losses, cfg.training.smoothing_window)?;
        Ok(path)
    };
    let every = cfg.training.checkpoint_every;
    while state.step < cfg.training.steps {
        match state.step(&data, &schedule, &cfg.training) {
            Ok(_) => {}
            Err(Error::NonFiniteLoss { step, loss }) => {
                let tail = state.losses.len().saturating_sub(20);
                let dump = Divergence { step, loss, recent_losses: state.losses[tail..].to_vec() };
                write_json(&out.join("divergence.json"), &dump)?;
                return Err(Error::NonFiniteLoss { step, loss }.into());
            }
            Err(e) => return Err(e.into()),
        }
        if every > 0 && state.step % every == 0 && state.step < cfg.training.steps {
            save(&state)?;
        }
    }
    save(&state)
}

/// A denoiser checkpoint ready for sampling.
pub struct Model {
    pub checkpoint: Checkpoint,
    pub denoiser: DenoiserParams<f32>,
    pub schedule: NoiseSchedule,
    pub sha256: String,
}

impl Model {
    pub fn load(path: &Path) -> AppResult<Self> {
        let checkpoint = Checkpoint::load(path)?;
        if checkpoint.kind() != CheckpointKind::Denoiser {
            return Err(AppError::Checkpoint(format!("{} holds no denoiser", path.display())));
        }
        let denoiser = checkpoint.denoiser.clone().expect("denoiser checkpoint");
        let schedule = NoiseSchedule::from_config(checkpoint.schedule)?;
        Ok(Model { sha256: sha256_file(path)?, checkpoint, denoiser, schedule })
    }

    pub fn responder(&self, sampler: SamplerConfig) -> ModelResponder<'_, DenoiserParams<f32>> {
        ModelResponder { model: &self.denoiser, autoencoder: &self.checkpoint.autoencoder, schedule: &self.schedule, sampler }
    }

    pub fn generate(&self, prompt: PromptSpec, mr: Option<Image2D>, seed: u64, sampler: SamplerConfig) -> AppResult<Image2D> {
        let req = SampleRequest { prompt, mr_image: mr, sampler, seed };
        Ok(generate(&self.denoiser, &self.checkpoint.autoencoder, &self.schedule, &req)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub prompt: String,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub checkpoint_sha256: String,
    pub corpus_fingerprint: String,
    pub mr_sha256: Option<String>,
    pub clip: String,
}

/// Writes `out` plus `out.json` (sidecar) and `out.config.json`.
pub fn cmd_sample(cfg: &RunConfig, ckpt: &Path, prompt: &str, mr: Option<&Path>, seed: u64, out: &Path) -> AppResult<()> {
    let spec = parse(prompt)?;
    let model = Model::load(ckpt)?;
    let mr_image = mr.map(|p| pngio::read_image(p, Modality::Mr)).transpose()?;
    let image = model.generate(spec, mr_image, seed, cfg.sampling)?;
    pngio::write_image(out, &image)?;
    let sidecar = SampleSidecar {
        prompt: format(&spec),
        seed,
        sampler: cfg.sampling,
        checkpoint_sha256: model.sha256.clone(),
        corpus_fingerprint: model.checkpoint.fingerprint.clone(),
        mr_sha256: mr.map(sha256_file).transpose()?,
        clip: image.meta.get("clip").cloned().unwrap_or_default(),
    };
    write_json(&sibling(out, "json"), &sidecar)?;
    cfg.archive(&sibling(out, "config.json"))
}

/// Pixels nearest to the configured cortex intensity, for MRs without a
/// known geometry.
pub fn cortex_from_mr(mr: &Image2D, cfg: &taugen_core::phantom::PhantomConfig) -> Mask {
    let m = &cfg.mr;
    let classes = [m.background, m.skull, m.cortex, m.white_matter, m.ventricle];
    let bits = mr
        .pixels()
        .iter()
        .map(|&v| {
            let d = |c: f64| (v as f64 - c).abs();
            classes.iter().all(|&c| d(m.cortex) <= d(c))
        })
        .collect();
    Mask { size: mr.size(), bits }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPanel {
    pub label: String,
    pub prompt: Option<String>,
    pub mmse: Option<u8>,
    pub cortical_uptake: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub checkpoint_sha256: String,
    pub subject: Option<usize>,
    /// `"geometry"` when masks come from the corpus manifest, `"mr_intensity"`
    /// when estimated from the MR.
    pub cortical_mask: String,
    pub panels: Vec<GridPanel>,
}

pub enum GridSource<'a> {
    Mr(&'a Path),
    Subject(usize),
}

/// The MR followed by one generated panel per MMSE value, sharing one seed.
pub fn cmd_sample_grid(cfg: &RunConfig, ckpt: &Path, source: GridSource<'_>, mmse: &[u8], seed: u64, out: &Path) -> AppResult<GridSidecar> {
    let model = Model::load(ckpt)?;
    let (mr, cortex, subject, mask_src) = match source {
        GridSource::Mr(p) => {
            let mr = pngio::read_image(p, Modality::Mr)?;
            let cortex = cortex_from_mr(&mr, &cfg.phantom);
            (mr, cortex, None, "mr_intensity")
        }
        GridSource::Subject(i) => {
            let corpus = load_corpus(cfg)?;
            let entry = corpus
                .manifest
                .entries
                .get(i)
                .ok_or_else(|| AppError::Config(format!("subject {i} not in corpus")))?;
            let masks = roi_masks(&entry.geometry, corpus.manifest.resolution)?;
            (corpus.mr(i)?, masks.cortical, Some(i), "geometry")
        }
    };
    let mut panels = vec![mr.clone()];
    let mut info = vec![GridPanel { label: "MR".into(), prompt: None, mmse: None, cortical_uptake: cortical_uptake(&mr, &cortex)? }];
    for &m in mmse {
        let spec = PromptSpec::later(m)?;
        let cond_mr = model.denoiser.config.mr_conditioned.then(|| mr.clone());
        let img = model.generate(spec, cond_mr, seed, cfg.sampling)?;
        info.push(GridPanel {
            label: format!("MMSE {m}"),
            prompt: Some(format(&spec)),
            mmse: Some(m),
            cortical_uptake: cortical_uptake(&img, &cortex)?,
        });
        panels.push(img);
    }
    pngio::write_row(out, &panels)?;
    let sidecar = GridSidecar {
        seed,
        sampler: cfg.sampling,
        checkpoint_sha256: model.sha256,
        subject,
        cortical_mask: mask_src.into(),
        panels: info,
    };
    write_json(&sibling(out, "json"), &sidecar)?;
    cfg.archive(&sibling(out, "config.json"))?;
    Ok(sidecar)
}

fn eval_config_echo(cfg: &RunConfig, corpus: &Corpus) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let s = &cfg.sampling;
    m.insert("corpus_fingerprint".into(), corpus.fingerprint());
    m.insert("root_seed".into(), cfg.seed.to_string());
    m.insert("sampler".into(), format!("{:?}", s.kind));
    m.insert("num_steps".into(), s.num_steps.to_string());
    m.insert("guidance_text".into(), s.guidance_text.to_string());
    m.insert("guidance_mr".into(), s.guidance_mr.to_string());
    m.insert("mmse_list".into(), format!("{:?}", cfg.evaluation.mmse_list));
    m.insert("sweeps".into(), cfg.evaluation.sweeps.to_string());
    m.insert("ablation_seeds".into(), cfg.evaluation.ablation_seeds.to_string());
    m.insert(
        "thresholds".into(),
        "declared acceptance targets for the synthetic corpus; no clinical reference values exist".into(),
    );
    m
}

fn finish_report(mut report: EvalReport, config: BTreeMap<String, String>, out: &Path, stem: &str, strict: bool) -> AppResult<EvalReport> {
    report.config.extend(config);
    write_json(&out.join(format!("{stem}.json")), &report)?;
    write_atomic(&out.join(format!("{stem}.md")), report::markdown(&report).as_bytes())?;
    if strict && !report.passed() {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(AppError::Strict(failed.join(", ")));
    }
    Ok(report)
}

/// `None` evaluates the phantom generator itself.
pub fn cmd_eval_sweep(cfg: &RunConfig, ckpt: Option<&Path>, out: &Path, strict: bool) -> AppResult<EvalReport> {
    let corpus = load_corpus(cfg)?;
    let subjects: Vec<Subject> = corpus.holdout_subjects()?;
    let mut echo = eval_config_echo(cfg, &corpus);
    let seed = cfg.derived_seed("eval");
    let report = match ckpt {
        None => {
            echo.insert("model".into(), "phantom oracle".into());
            mmse_sweep(&PhantomResponder { config: corpus.manifest.phantom }, &subjects, &cfg.evaluation, &cfg.phantom, seed)?
        }
        Some(path) => {
            let model = Model::load(path)?;
            check_fingerprint("checkpoint", &model.checkpoint.fingerprint, &corpus)?;
            echo.insert("checkpoint_sha256".into(), model.sha256.clone());
            echo.insert("checkpoint_step".into(), model.checkpoint.step.to_string());
            mmse_sweep(&model.responder(cfg.sampling), &subjects, &cfg.evaluation, &cfg.phantom, seed)?
        }
    };
    cfg.archive(&out.join(CONFIG_FILE))?;
    finish_report(report, echo, out, "sweep_report", strict)
}

/// Compares an MR-conditioned checkpoint against a text-only baseline.
pub fn cmd_eval_ablate(cfg: &RunConfig, ckpt_mr: &Path, ckpt_text: &Path, out: &Path, strict: bool) -> AppResult<EvalReport> {
    let corpus = load_corpus(cfg)?;
    let mr = Model::load(ckpt_mr)?;
    let text = Model::load(ckpt_text)?;
    if mr.checkpoint.fingerprint != text.checkpoint.fingerprint {
        return Err(Error::CorpusMismatch(format!(
            "{} vs {}",
            mr.checkpoint.fingerprint, text.checkpoint.fingerprint
        ))
        .into());
    }
    check_fingerprint("checkpoint", &mr.checkpoint.fingerprint, &corpus)?;
    let subjects = corpus.holdout_subjects()?;
    let mut echo = eval_config_echo(cfg, &corpus);
    echo.insert("checkpoint_mr_sha256".into(), mr.sha256.clone());
    echo.insert("checkpoint_text_sha256".into(), text.sha256.clone());
    let (rt, rm) = (text.responder(cfg.sampling), mr.responder(cfg.sampling));
    let report = ablation_report(
        &rt as &dyn TauResponder,
        &rm as &dyn TauResponder,
        &subjects,
        &cfg.evaluation,
        &cfg.phantom,
        cfg.derived_seed("eval"),
    )?;
    cfg.archive(&out.join(CONFIG_FILE))?;
    finish_report(report, echo, out, "ablation_report", strict)
}

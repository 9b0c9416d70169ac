//! The run configuration: one JSON document, merged with command-line flags and
//! archived next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taugen_core::autoencoder::{AeTrainConfig, AutoencoderConfig};
use taugen_core::denoiser::DenoiserConfig;
use taugen_core::eval::EvalConfig;
use taugen_core::phantom::PhantomConfig;
use taugen_core::sampler::SamplerConfig;
use taugen_core::schedule::ScheduleConfig;
use taugen_core::seed::derive_seed;
use taugen_core::trainer::TrainConfig;

use crate::error::{AppError, AppResult};
use crate::fsutil::{read_json, write_json};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TAUGEN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { n: 139, seed: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    /// Corpus directory holding `manifest.json`.
    pub corpus: Option<PathBuf>,
    /// Trained autoencoder checkpoint; unused in identity mode.
    pub autoencoder: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream is derived from this value and a purpose label.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub phantom: PhantomConfig,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderConfig,
    pub autoencoder_training: AeTrainConfig,
    /// `mr_conditioned` is overridden by `--mode`.
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub sampling: SamplerConfig,
    pub evaluation: EvalConfig,
    pub paths: PathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        let autoencoder = AutoencoderConfig::learned(phantom.resolution);
        RunConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            phantom,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::compact(autoencoder.latent_channels, true),
            autoencoder,
            autoencoder_training: AeTrainConfig::default(),
            training: TrainConfig::default(),
            sampling: SamplerConfig::default(),
            evaluation: EvalConfig::default(),
            paths: PathSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        read_json(path)
    }

    pub fn load_or_default(path: Option<&Path>) -> AppResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn archive(&self, path: &Path) -> AppResult<()> {
        write_json(path, self)
    }

    /// Seed of the stream named `label`.
    pub fn derived_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }

    pub fn validate(&self) -> AppResult<()> {
        self.phantom.validate()?;
        self.autoencoder.validate()?;
        self.denoiser.validate()?;
        self.training.validate()?;
        self.sampling.validate(&taugen_core::NoiseSchedule::from_config(self.schedule)?)?;
        if self.autoencoder.image_size != self.phantom.resolution {
            return Err(AppError::Config(format!(
                "autoencoder.image_size {} differs from phantom.resolution {}",
                self.autoencoder.image_size, self.phantom.resolution
            )));
        }
        if self.denoiser.latent_channels != self.autoencoder.latent_channels
            || self.denoiser.latent_size != self.autoencoder.latent_size()
        {
            return Err(AppError::Config(format!(
                "denoiser latent {}x{}x{} differs from autoencoder latent {}x{}x{}",
                self.denoiser.latent_channels,
                self.denoiser.latent_size,
                self.denoiser.latent_size,
                self.autoencoder.latent_channels,
                self.autoencoder.latent_size(),
                self.autoencoder.latent_size()
            )));
        }
        if self.evaluation.mmse_list.iter().any(|&m| m > 30) || self.evaluation.mmse_list.len() < 2 {
            return Err(AppError::Config("evaluation.mmse_list needs at least two MMSE values in 0..=30".into()));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> AppResult<&Path> {
        self.paths.corpus.as_deref().ok_or_else(|| AppError::Config("paths.corpus is required (set it in the config or pass --corpus)".into()))
    }

    /// `paths.out`, else `$TAUGEN_OUT`, else `runs`.
    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

//! On-disk corpus: paired PNGs plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taugen_core::eval::Subject;
use taugen_core::phantom::{default_holdout, make_anatomy, make_uptake, plan_corpus, roi_masks, PhantomConfig, PhantomGeometry};
use taugen_core::prompt::{format, parse};
use taugen_core::{Image2D, Modality, PromptSpec};

use crate::error::{AppError, AppResult};
use crate::fsutil::{read_json, write_json};
use crate::pngio;

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    /// Relative to the manifest directory.
    pub mr_path: String,
    pub tau_path: String,
    /// Canonical prompt string.
    pub prompt_text: String,
    pub geometry: PhantomGeometry,
    /// Texture-noise seed of the tau image.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: String,
    pub resolution: usize,
    pub corpus_seed: u64,
    /// The last `holdout_count` entries are reserved for evaluation.
    pub holdout_count: usize,
    pub phantom: PhantomConfig,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec_pretty(self).expect("manifest serializes");
        b.push(b'\n');
        b
    }

    /// SHA-256 of the serialized manifest, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.entries.len() - self.holdout_count.min(self.entries.len())
    }

    pub fn holdout_range(&self) -> std::ops::Range<usize> {
        self.train_range().end..self.entries.len()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `n` MR/tau pairs and the manifest under `dir`.
pub fn generate_corpus(dir: &Path, n: usize, corpus_seed: u64, phantom: &PhantomConfig) -> AppResult<CorpusManifest> {
    phantom.validate()?;
    let mut entries = Vec::with_capacity(n);
    for plan in plan_corpus(n, corpus_seed, phantom.resolution) {
        let mr = make_anatomy(&plan.geometry, phantom)?;
        let tau = make_uptake(&plan.geometry, &plan.prompt, plan.seed, phantom)?;
        let mr_path = format!("mr/{:04}.png", plan.index);
        let tau_path = format!("tau/{:04}.png", plan.index);
        pngio::write_image(&dir.join(&mr_path), &mr)?;
        pngio::write_image(&dir.join(&tau_path), &tau)?;
        entries.push(ManifestEntry {
            index: plan.index,
            mr_path,
            tau_path,
            prompt_text: format(&plan.prompt),
            geometry: plan.geometry,
            seed: plan.seed,
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION.into(),
        resolution: phantom.resolution,
        corpus_seed,
        holdout_count: default_holdout(n),
        phantom: *phantom,
        entries,
    };
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    crate::fsutil::write_atomic(&dir.join(MANIFEST_FILE), &manifest.to_bytes())?;
    Ok(manifest)
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn load(dir: &Path) -> AppResult<Self> {
        let manifest: CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(AppError::Config(format!("unsupported manifest version {:?}", manifest.version)));
        }
        Ok(Corpus { dir: dir.to_path_buf(), manifest })
    }

    pub fn save(&self) -> AppResult<()> {
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn fingerprint(&self) -> String {
        self.manifest.fingerprint()
    }

    pub fn prompt(&self, i: usize) -> AppResult<PromptSpec> {
        Ok(parse(&self.manifest.entries[i].prompt_text)?)
    }

    pub fn mr(&self, i: usize) -> AppResult<Image2D> {
        pngio::read_image(&self.dir.join(&self.manifest.entries[i].mr_path), Modality::Mr)
    }

    pub fn tau(&self, i: usize) -> AppResult<Image2D> {
        pngio::read_image(&self.dir.join(&self.manifest.entries[i].tau_path), Modality::Tau)
    }

    /// Held-out entries with their stored MR and geometry-derived masks.
    pub fn holdout_subjects(&self) -> AppResult<Vec<Subject>> {
        self.manifest
            .holdout_range()
            .map(|i| {
                let e = &self.manifest.entries[i];
                Ok(Subject {
                    index: e.index,
                    prompt: self.prompt(i)?,
                    geometry: e.geometry,
                    mr: self.mr(i)?,
                    masks: roi_masks(&e.geometry, self.manifest.resolution)?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig { resolution: 16, ..PhantomConfig::default() };
        let m = generate_corpus(dir.path(), 12, 3, &cfg).unwrap();
        let c = Corpus::load(dir.path()).unwrap();
        assert_eq!(c.manifest, m);
        assert_eq!(c.fingerprint(), m.fingerprint());
        assert_eq!(m.holdout_count, 2);
        assert_eq!(c.holdout_subjects().unwrap().len(), 2);
        assert_eq!(std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), m.to_bytes());
        for i in 0..12 {
            assert_eq!(format(&c.prompt(i).unwrap()), m.entries[i].prompt_text);
            assert_eq!(c.mr(i).unwrap().size(), 16);
        }
    }
}

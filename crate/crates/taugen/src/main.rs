use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taugen::pipeline::{self, GridSource, Mode};
use taugen::{AppError, AppResult, RunConfig};

/// Synthetic tau-PET generation with text- and MR-conditional latent diffusion.
///
/// Exit codes: 0 ok, 1 thresholds failed under --strict, 2 config or prompt
/// error, 3 I/O error, 4 training diverged, 5 conditioning mismatch, 6 corpus
/// fingerprint mismatch.
#[derive(Parser)]
#[command(name = "taugen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed of every derived random stream.
    #[arg(long)]
    root_seed: Option<u64>,
    /// Corpus directory (`paths.corpus`).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance_text: Option<f64>,
    #[arg(long)]
    guidance_mr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Ae,
    Ldm,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Sweep,
    Ablate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired MR/tau phantoms and a manifest.
    Corpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        /// Corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the autoencoder or the latent denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "text_mr")]
        mode: Mode,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Autoencoder checkpoint (`paths.autoencoder`).
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        /// Total denoiser steps (`training.steps`).
        #[arg(long)]
        train_steps: Option<u64>,
        /// Continue from a denoiser checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one tau image.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        mr: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// MR panel followed by one generated panel per MMSE value.
    SampleGrid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "subject")]
        mr: Option<PathBuf>,
        /// Corpus entry whose MR and masks to use.
        #[arg(long)]
        subject: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        mmse: Option<Vec<u8>>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[arg(value_enum)]
        kind: EvalKind,
        /// Model to score; `sweep` without it scores the phantom generator.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Text-only model for `ablate`.
        #[arg(long)]
        ckpt_baseline: Option<PathBuf>,
        #[arg(long)]
        sweeps: Option<usize>,
        /// Exit 1 when any threshold check fails.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> AppResult<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.root_seed {
        cfg.seed = s;
    }
    if let Some(c) = &common.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, f: &SamplingFlags) {
    if let Some(n) = f.steps {
        cfg.sampling.num_steps = n;
    }
    if let Some(g) = f.guidance_text {
        cfg.sampling.guidance_text = g;
    }
    if let Some(g) = f.guidance_mr {
        cfg.sampling.guidance_mr = g;
    }
}

fn out_dir(cfg: &mut RunConfig, out: Option<PathBuf>, sub: &str) -> PathBuf {
    match out {
        Some(o) => {
            cfg.paths.out = Some(o.clone());
            o
        }
        None => cfg.out_dir().join(sub),
    }
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Corpus { common, n, seed, out } => {
            let mut cfg = load(&common)?;
            if let Some(n) = n {
                cfg.corpus.n = n;
            }
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            let out = out_dir(&mut cfg, out, "corpus");
            let m = pipeline::cmd_corpus(&cfg, &out)?;
            println!("wrote {} pairs to {} (fingerprint {})", m.entries.len(), out.display(), m.fingerprint());
        }
        Command::Train { common, mode, stage, autoencoder, train_steps, resume, out } => {
            let mut cfg = load(&common)?;
            if let Some(a) = autoencoder {
                cfg.paths.autoencoder = Some(a);
            }
            if let Some(s) = train_steps {
                cfg.training.steps = s;
            }
            cfg.denoiser.mr_conditioned = mode.mr_conditioned();
            match stage {
                Stage::Ae => {
                    let out = out_dir(&mut cfg, out, "autoencoder");
                    let (path, s) = pipeline::train_ae(&cfg, &out)?;
                    println!(
                        "wrote {} (held-out PSNR: MR {:.2} dB, tau {:.2} dB)",
                        path.display(),
                        s.holdout_psnr_mr,
                        s.holdout_psnr_tau
                    );
                }
                Stage::Ldm => {
                    let sub = if mode.mr_conditioned() { "ldm_text_mr" } else { "ldm_text" };
                    let out = out_dir(&mut cfg, out, sub);
                    let path = pipeline::train_ldm(&cfg, mode, &out, resume.as_deref())?;
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::Sample { common, sampling, ckpt, prompt, mr, seed, out } => {
            let mut cfg = load(&common)?;
            apply_sampling(&mut cfg, &sampling);
            cfg.validate()?;
            pipeline::cmd_sample(&cfg, &ckpt, &prompt, mr.as_deref(), seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::SampleGrid { common, sampling, ckpt, mr, subject, mmse, seed, out } => {
            let mut cfg = load(&common)?;
            apply_sampling(&mut cfg, &sampling);
            if let Some(m) = mmse {
                cfg.evaluation.mmse_list = m;
            }
            cfg.validate()?;
            let source = match (&mr, subject) {
                (Some(p), _) => GridSource::Mr(p),
                (None, Some(i)) => GridSource::Subject(i),
                (None, None) => return Err(AppError::Config("sample-grid needs --mr or --subject".into())),
            };
            let list = cfg.evaluation.mmse_list.clone();
            let grid = pipeline::cmd_sample_grid(&cfg, &ckpt, source, &list, seed, &out)?;
            for p in &grid.panels {
                println!("{:>8}  cortical uptake {:.4}", p.label, p.cortical_uptake);
            }
        }
        Command::Eval { common, sampling, kind, ckpt, ckpt_baseline, sweeps, strict, out } => {
            let mut cfg = load(&common)?;
            apply_sampling(&mut cfg, &sampling);
            if let Some(s) = sweeps {
                cfg.evaluation.sweeps = s;
            }
            cfg.validate()?;
            let report = match kind {
                EvalKind::Sweep => {
                    let out = out_dir(&mut cfg, out, "eval_sweep");
                    pipeline::cmd_eval_sweep(&cfg, ckpt.as_deref(), &out, strict)?
                }
                EvalKind::Ablate => {
                    let need = |p: &Option<PathBuf>, flag: &str| -> AppResult<PathBuf> {
                        p.clone().ok_or_else(|| AppError::Config(format!("eval ablate needs {flag}")))
                    };
                    let (m, t) = (need(&ckpt, "--ckpt")?, need(&ckpt_baseline, "--ckpt-baseline")?);
                    let out = out_dir(&mut cfg, out, "eval_ablate");
                    pipeline::cmd_eval_ablate(&cfg, &m, &t, &out, strict)?
                }
            };
            for c in &report.checks {
                println!("{}: {:.4} {} {} {}", c.name, c.value, c.relation, c.threshold, if c.passed { "PASS" } else { "FAIL" });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

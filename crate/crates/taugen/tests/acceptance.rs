//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The end-to-end criteria train real models through the command-line binary;
//! their artifacts are cached under the cargo target directory, keyed by the
//! binary's hash, so a rerun with unchanged code only re-evaluates.
//! Set `TAUGEN_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use taugen::checkpoint::Checkpoint;
use taugen::corpus::Corpus;
use taugen::pipeline::{checkpoint_name, AE_CHECKPOINT};
use taugen::RunConfig;
use taugen_core::autoencoder::{psnr, AutoencoderConfig, AutoencoderParams};
use taugen_core::denoiser::{init_denoiser, DenoiserConfig, DenoiserParams, NoisePredictor};
use taugen_core::phantom::{make_uptake, plan_corpus, PhantomConfig};
use taugen_core::prompt::{embed, format, null_condition, parse, Stage};
use taugen_core::sampler::{guided_noise, sample_latent, SamplerConfig, SamplerKind};
use taugen_core::seed::rng;
use taugen_core::tensor::Tensor;
use taugen_core::trainer::{grad_check, TrainBatch};
use taugen_core::{ConditionVector, Modality, NoiseSchedule, PromptSpec, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_tensor(shape: [usize; 4], label: &str) -> Tensor<f64> {
    let mut r = rng(11, label, 0);
    Tensor { shape, data: (0..shape.iter().product()).map(|_| normal(&mut r)).collect() }
}

/// Seeded init with every weight nudged, so the zero-initialized output layer
/// does not hide gradients from the rest of the network.
fn perturbed(cfg: &DenoiserConfig) -> DenoiserParams<f64> {
    let mut p = init_denoiser(cfg, 5).unwrap().cast::<f64>();
    let mut r = rng(5, "acceptance/perturb", 0);
    for v in p.params.values.iter_mut() {
        *v += 0.05 * normal(&mut r);
    }
    p
}

fn c1_forward_marginal() -> Outcome {
    let s = NoiseSchedule::from_config(Default::default()).unwrap();
    let draws = 10_000;
    let mut worst = 0.0f64;
    let mut analytic_worst = 0.0f64;
    for t in [1usize, 10, 100, 999] {
        // Common random numbers: the chain's per-step noises are folded into
        // the one standard normal q_sample consumes, with coefficients built
        // from the betas alone.
        let mut coeff = vec![0.0; t + 1];
        let mut keep = 1.0;
        for k in (0..=t).rev() {
            coeff[k] = s.beta[k].sqrt() * keep;
            keep *= (1.0 - s.beta[k]).sqrt();
        }
        let norm = coeff.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut r = rng(1, "acceptance/c1", t as u64);
        let (mut chain, mut direct) = (Vec::with_capacity(draws), Vec::with_capacity(draws));
        for _ in 0..draws {
            let z0: f64 = 0.5 + 0.3 * normal(&mut r);
            let mut z = z0;
            let mut folded = 0.0;
            for (k, c) in coeff.iter().enumerate() {
                let e = normal(&mut r);
                z = (1.0 - s.beta[k]).sqrt() * z + s.beta[k].sqrt() * e;
                folded += c * e;
            }
            let x0 = Tensor { shape: [1, 1, 1, 1], data: vec![z0] };
            let eps = Tensor { shape: [1, 1, 1, 1], data: vec![folded / norm] };
            direct.push(s.q_sample_at(&x0, t, &eps).unwrap().data[0]);
            chain.push(z);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
        };
        let ((mc, vc), (md, vd)) = (stats(&chain), stats(&direct));
        worst = worst.max((mc - md).abs()).max((vc - vd).abs());
        let ab = s.alpha_bar[t];
        let (ma, va) = (ab.sqrt() * 0.5, ab * 0.09 + 1.0 - ab);
        analytic_worst = analytic_worst.max((mc - ma).abs()).max((vc - va).abs());
    }
    outcome(worst <= 1e-2, format!("max |Δmean|,|Δvar| = {worst:.2e} (chain vs analytic marginal: {analytic_worst:.2e})"))
}

fn c2_gradients() -> Outcome {
    let s = NoiseSchedule::from_config(Default::default()).unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for mr in [false, true] {
        let cfg = DenoiserConfig::tiny(2, 4, mr);
        let p = perturbed(&cfg);
        let shape = [2, 2, 4, 4];
        let specs: Vec<PromptSpec> = PromptSpec::all().step_by(97).take(2).collect();
        let b = TrainBatch {
            tau_latents: random_tensor(shape, "acceptance/tau"),
            mr_latents: mr.then(|| random_tensor(shape, "acceptance/mr")),
            conditions: specs.iter().map(embed).collect(),
            timesteps: vec![37, 640],
            noise: random_tensor(shape, "acceptance/noise"),
        };
        let err = grad_check(&p, &s, &b, 1e-4).unwrap();
        ok &= err <= 1e-3;
        details.push(format!("{} {:.2e}", if mr { "text+MR" } else { "text" }, err));
    }
    outcome(ok, format!("max relative error: {}", details.join(", ")))
}

/// Predicts the exact noise that maps a fixed `z0` to `z_t`.
struct Oracle<'a> {
    z0: &'a Tensor<f64>,
    schedule: &'a NoiseSchedule,
}

impl NoisePredictor<f64> for Oracle<'_> {
    fn mr_conditioned(&self) -> bool {
        false
    }

    fn predict(&self, z_t: &Tensor<f64>, t: &[usize], _: Option<&Tensor<f64>>, _: &[ConditionVector]) -> Result<Tensor<f64>> {
        let ab = self.schedule.alpha_bar[t[0]];
        Ok(Tensor {
            shape: z_t.shape,
            data: z_t.data.iter().zip(&self.z0.data).map(|(z, x)| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect(),
        })
    }
}

fn c3_sampler_exactness() -> Outcome {
    let s = NoiseSchedule::from_config(Default::default()).unwrap();
    let phantom = PhantomConfig::default();
    let plan = &plan_corpus(1, 4, phantom.resolution)[0];
    let img = make_uptake(&plan.geometry, &plan.prompt, plan.seed, &phantom).unwrap();
    let ae = AutoencoderParams::<f64>::init(&AutoencoderConfig::identity(phantom.resolution), 0).unwrap();
    let z0 = ae.encode(std::slice::from_ref(&img)).unwrap();
    let oracle = Oracle { z0: &z0, schedule: &s };
    let mut worst = 0.0f64;
    for steps in [10, 50, 1000] {
        let cfg = SamplerConfig { num_steps: steps, kind: SamplerKind::Deterministic, ..SamplerConfig::default() };
        let z_t = random_tensor(z0.shape, "acceptance/z_T");
        let out = sample_latent(&oracle, &s, z_t, None, &embed(&plan.prompt), &cfg, 1).unwrap();
        worst = worst.max(out.max_abs_diff(&z0));
        let decoded = ae.decode_tensor(&out).unwrap();
        for (a, b) in decoded.data.iter().zip(img.pixels()) {
            worst = worst.max((a - *b as f64).abs());
        }
    }
    outcome(worst <= 1e-4, format!("max |z0 − ẑ0| and image error over 10/50/1000 steps: {worst:.2e}"))
}

fn c4_guidance() -> Outcome {
    let mut ok = true;
    let spec = PromptSpec::later(13).unwrap();
    let c = embed(&spec);
    let z = random_tensor([1, 2, 4, 4], "acceptance/z");
    let mr = random_tensor([1, 2, 4, 4], "acceptance/mr1");
    let t = 420;
    // Unit scales are the fully conditioned prediction, bit for bit.
    let text = perturbed(&DenoiserConfig::tiny(2, 4, false));
    let both = perturbed(&DenoiserConfig::tiny(2, 4, true));
    let unit_t = guided_noise(&text, &z, t, None, &c, 1.0, 1.0).unwrap();
    let full_t = text.predict(&z, &[t], None, std::slice::from_ref(&c)).unwrap();
    let unit_m = guided_noise(&both, &z, t, Some(&mr), &c, 1.0, 1.0).unwrap();
    let full_m = both.predict(&z, &[t], Some(&mr), std::slice::from_ref(&c)).unwrap();
    let bits = |a: &Tensor<f64>, b: &Tensor<f64>| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
    ok &= bits(&unit_t, &full_t) && bits(&unit_m, &full_m);
    // Three-term formula against separate predictions.
    let null = null_condition();
    let zeros = Tensor::zeros(mr.shape);
    let p = |m: &Tensor<f64>, cv: &ConditionVector| both.predict(&z, &[t], Some(m), std::slice::from_ref(cv)).unwrap();
    let (e_nn, e_mn, e_mc) = (p(&zeros, &null), p(&mr, &null), p(&mr, &c));
    let mut worst = 0.0f64;
    for (g_text, g_mr) in [(3.0, 1.5), (7.5, 0.0), (0.0, 2.0), (2.0, 1.0)] {
        let got = guided_noise(&both, &z, t, Some(&mr), &c, g_text, g_mr).unwrap();
        for i in 0..got.data.len() {
            let want = e_nn.data[i] + g_mr * (e_mn.data[i] - e_nn.data[i]) + g_text * (e_mc.data[i] - e_mn.data[i]);
            worst = worst.max((got.data[i] - want).abs());
        }
    }
    let (e_n, e_c) = (
        text.predict(&z, &[t], None, std::slice::from_ref(&null)).unwrap(),
        text.predict(&z, &[t], None, std::slice::from_ref(&c)).unwrap(),
    );
    let got = guided_noise(&text, &z, t, None, &c, 3.0, 0.0).unwrap();
    for i in 0..got.data.len() {
        worst = worst.max((got.data[i] - (e_n.data[i] + 3.0 * (e_c.data[i] - e_n.data[i]))).abs());
    }
    ok &= worst <= 1e-10;
    outcome(ok, format!("unit scales bitwise: {}; max deviation from brute force: {worst:.2e}", bits(&unit_m, &full_m) && bits(&unit_t, &full_t)))
}

fn c5_prompt_codec() -> Outcome {
    let all: Vec<PromptSpec> = PromptSpec::all().collect();
    let round = all.iter().filter(|s| parse(&format(s)).as_ref() == Ok(*s)).count();
    let verbatim = [("a tau image with later stage, MMSE 30", 30u8), ("a tau image with later stage, MMSE 13.", 13)];
    let parsed = verbatim
        .iter()
        .filter(|(text, m)| matches!(parse(text), Ok(s) if s.stage == Stage::Later && s.mmse == *m && s.gender.is_none() && s.amyloid.is_none()))
        .count();
    outcome(
        all.len() == 558 && round == all.len() && parsed == 2,
        format!("{round}/{} specs round-trip, {parsed}/2 verbatim prompts parse", all.len()),
    )
}

fn hash_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn taugen(dir: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_taugen")).current_dir(dir).args(args).env_remove("TAUGEN_OUT").output().unwrap();
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("taugen {} exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

/// Runs `args` unless `marker` exists; returns the stage's wall time, stored
/// next to the marker so cached runs report the original timing.
fn stage(dir: &Path, marker: &str, args: &[&str]) -> std::result::Result<f64, String> {
    let secs_file = dir.join(format!("{}.secs", marker.replace('/', "_")));
    if dir.join(marker).exists() {
        if let Ok(s) = std::fs::read_to_string(&secs_file) {
            return Ok(s.trim().parse().unwrap_or(f64::NAN));
        }
    }
    let t0 = Instant::now();
    taugen(dir, args)?;
    let secs = t0.elapsed().as_secs_f64();
    std::fs::write(&secs_file, format!("{secs}\n")).unwrap();
    Ok(secs)
}

struct E2e {
    dir: PathBuf,
    times: BTreeMap<&'static str, f64>,
}

/// Corpus, autoencoder, both denoisers, and an untrained control, at full scale.
fn end_to_end() -> std::result::Result<E2e, String> {
    let key = hash_file(Path::new(env!("CARGO_BIN_EXE_taugen")));
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(key);
    std::fs::create_dir_all(&dir).unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = Some("data".into());
    cfg.paths.autoencoder = Some(Path::new("ae").join(AE_CHECKPOINT));
    cfg.archive(&dir.join("run.json")).unwrap();
    let mut times = BTreeMap::new();
    let steps = cfg.training.steps.to_string();
    let ckpt = checkpoint_name(cfg.training.steps);
    let mr_ckpt = format!("mr/{ckpt}");
    let text_ckpt = format!("text/{ckpt}");
    times.insert("corpus", stage(&dir, "data/manifest.json", &["corpus", "--config", "run.json", "--n", "139", "--seed", "7", "--out", "data"])?);
    times.insert("autoencoder", stage(&dir, "ae/autoencoder.ckpt", &["train", "--config", "run.json", "--stage", "ae", "--out", "ae"])?);
    times.insert(
        "ldm_text_mr",
        stage(&dir, &mr_ckpt, &["train", "--config", "run.json", "--stage", "ldm", "--mode", "text_mr", "--train-steps", &steps, "--out", "mr"])?,
    );
    times.insert(
        "ldm_text",
        stage(&dir, &text_ckpt, &["train", "--config", "run.json", "--stage", "ldm", "--mode", "text", "--train-steps", &steps, "--out", "text"])?,
    );
    stage(&dir, "untrained/ckpt_0.ckpt", &["train", "--config", "run.json", "--stage", "ldm", "--mode", "text_mr", "--train-steps", "0", "--out", "untrained"])?;
    times.insert("sweep", stage(&dir, "sweep/sweep_report.json", &["eval", "sweep", "--config", "run.json", "--ckpt", &mr_ckpt, "--out", "sweep"])?);
    for k in 0..5 {
        let out = format!("control_{k}");
        let seed = (100 + k).to_string();
        stage(
            &dir,
            &format!("{out}/sweep_report.json"),
            &["eval", "sweep", "--config", "run.json", "--root-seed", &seed, "--sweeps", "10", "--ckpt", "untrained/ckpt_0.ckpt", "--out", &out],
        )?;
    }
    times.insert(
        "ablation",
        stage(&dir, "ablate/ablation_report.json", &["eval", "ablate", "--config", "run.json", "--ckpt", &mr_ckpt, "--ckpt-baseline", &text_ckpt, "--out", "ablate"])?,
    );
    stage(&dir, "grid.png", &["sample-grid", "--config", "run.json", "--ckpt", &mr_ckpt, "--subject", "120", "--mmse", "30,25,20,13", "--out", "grid.png"])?;
    Ok(E2e { dir, times })
}

fn c6_autoencoder(e2e: &std::result::Result<E2e, String>) -> Outcome {
    // Identity mode round-trips bitwise.
    let phantom = PhantomConfig::default();
    let imgs: Vec<_> = plan_corpus(16, 21, phantom.resolution)
        .iter()
        .map(|p| make_uptake(&p.geometry, &p.prompt, p.seed, &phantom).unwrap())
        .collect();
    let id = AutoencoderParams::<f32>::init(&AutoencoderConfig::identity(phantom.resolution), 0).unwrap();
    let back = id.decode(&id.encode(&imgs).unwrap(), Modality::Tau).unwrap();
    let bitwise = imgs.iter().zip(&back).all(|(a, b)| a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let e2e = match e2e {
        Ok(e) => e,
        Err(msg) => return outcome(false, format!("identity bitwise: {bitwise}; learned run failed: {msg}")),
    };
    let ckpt = Checkpoint::load(&e2e.dir.join("ae").join(AE_CHECKPOINT)).unwrap();
    let corpus = Corpus::load(&e2e.dir.join("data")).unwrap();
    let held: Vec<usize> = corpus.manifest.holdout_range().take(16).collect();
    let mut per = BTreeMap::new();
    for (name, modality) in [("MR", Modality::Mr), ("tau", Modality::Tau)] {
        let imgs: Vec<_> = held.iter().map(|&i| if modality == Modality::Mr { corpus.mr(i) } else { corpus.tau(i) }.unwrap()).collect();
        let rec = ckpt.autoencoder.decode(&ckpt.autoencoder.encode(&imgs).unwrap(), modality).unwrap();
        let v: Vec<f64> = imgs.iter().zip(&rec).map(|(a, b)| psnr(a.pixels(), b.pixels()).unwrap()).collect();
        per.insert(name, v);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all: Vec<f64> = per.values().flatten().copied().collect();
    let overall = mean(&all);
    let steps = ckpt.step;
    let minutes = e2e.times["autoencoder"] / 60.0;
    outcome(
        bitwise && overall >= 28.0 && steps <= 5000 && minutes <= 30.0,
        format!(
            "learned: {overall:.2} dB mean over {} held-out images (MR {:.2}, tau {:.2}) after {steps} steps in {minutes:.1} min; identity bitwise: {bitwise}",
            all.len(),
            mean(&per["MR"]),
            mean(&per["tau"])
        ),
    )
}

fn read_report(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn c7_mmse_sweep(e2e: &std::result::Result<E2e, String>) -> Outcome {
    let e2e = match e2e {
        Ok(e) => e,
        Err(msg) => return outcome(false, msg.clone()),
    };
    let r = read_report(&e2e.dir.join("sweep/sweep_report.json"));
    let rho = r["sweep"]["spearman_rho"].as_f64().unwrap();
    let win = r["sweep"]["win_rate"].as_f64().unwrap();
    let sweeps = r["sweep"]["sweeps"].as_u64().unwrap();
    let control: Vec<f64> =
        (0..5).map(|k| read_report(&e2e.dir.join(format!("control_{k}/sweep_report.json")))["sweep"]["spearman_rho"].as_f64().unwrap()).collect();
    let control_mean = control.iter().map(|v| v.abs()).sum::<f64>() / 5.0;
    let hours = (e2e.times["ldm_text_mr"] + e2e.times["sweep"]) / 3600.0;
    outcome(
        rho >= 0.8 && win >= 0.8 && sweeps == 50 && control_mean < 0.3,
        format!(
            "rho {rho:.3}, win-rate {win:.2} over {sweeps} paired seeds; untrained mean |rho| {control_mean:.3} over 5 seeds; mean uptake {}; {hours:.2} h",
            r["sweep"]["mean_uptake"]
        ),
    )
}

fn c8_ablation(e2e: &std::result::Result<E2e, String>) -> Outcome {
    let e2e = match e2e {
        Ok(e) => e,
        Err(msg) => return outcome(false, msg.clone()),
    };
    let r = read_report(&e2e.dir.join("ablate/ablation_report.json"));
    let a = &r["ablation"];
    let (dm, dt, ds) = (a["dice_mr"].as_f64().unwrap(), a["dice_text"].as_f64().unwrap(), a["dice_text_shuffled"].as_f64().unwrap());
    outcome(
        dm - dt >= 0.1 && (dt - ds).abs() < 0.05 && a["subjects"] == 19,
        format!(
            "Dice MR {dm:.3} vs text-only {dt:.3} (gain {:.3}); text-only matched vs shuffled |Δ| {:.3}; edge corr MR {:.3} vs text {:.3}",
            dm - dt,
            (dt - ds).abs(),
            a["edge_corr_mr"].as_f64().unwrap(),
            a["edge_corr_text"].as_f64().unwrap()
        ),
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every command at small scale, then again in a fresh directory from the
/// first run's archived configs.
fn c9_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 9;
    cfg.corpus.n = 24;
    cfg.phantom.resolution = 16;
    cfg.autoencoder = AutoencoderConfig::learned(16);
    cfg.autoencoder_training.steps = 15;
    cfg.denoiser = DenoiserConfig::tiny(4, 4, true);
    cfg.training.steps = 8;
    cfg.training.batch_size = 4;
    cfg.training.checkpoint_every = 4;
    cfg.sampling.num_steps = 5;
    cfg.evaluation.sweeps = 3;
    cfg.evaluation.ablation_seeds = 1;
    cfg.paths.corpus = Some("data".into());
    cfg.paths.autoencoder = Some(Path::new("ae").join(AE_CHECKPOINT));
    cfg.archive(&a.join("run.json")).unwrap();
    let commands = |c: &dyn Fn(&str) -> String| -> Vec<Vec<String>> {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        vec![
            v(&["corpus", "--config", &c("data"), "--out", "data"]),
            v(&["train", "--config", &c("ae"), "--stage", "ae", "--out", "ae"]),
            v(&["train", "--config", &c("mr"), "--stage", "ldm", "--mode", "text_mr", "--out", "mr"]),
            v(&["train", "--config", &c("text"), "--stage", "ldm", "--mode", "text", "--out", "text"]),
            v(&["sample", "--config", &c("img"), "--ckpt", "mr/ckpt_8.ckpt", "--prompt", "a tau image with later stage, MMSE 13", "--mr", "data/mr/0023.png", "--out", "img.png"]),
            v(&["sample-grid", "--config", &c("grid"), "--ckpt", "mr/ckpt_8.ckpt", "--subject", "23", "--out", "grid.png"]),
            v(&["eval", "sweep", "--config", &c("sweep"), "--ckpt", "mr/ckpt_8.ckpt", "--out", "sweep"]),
            v(&["eval", "ablate", "--config", &c("ablate"), "--ckpt", "mr/ckpt_8.ckpt", "--ckpt-baseline", "text/ckpt_8.ckpt", "--out", "ablate"]),
        ]
    };
    let run = |dir: &Path, cmds: Vec<Vec<String>>| -> std::result::Result<(), String> {
        for c in cmds {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            taugen(dir, &args)?;
        }
        Ok(())
    };
    if let Err(e) = run(&a, commands(&|_| "run.json".into())) {
        return outcome(false, e);
    }
    let archived = |name: &str| -> String {
        let p = match name {
            "img" => a.join("img.config.json"),
            "grid" => a.join("grid.config.json"),
            d => a.join(d).join("config.json"),
        };
        p.to_str().unwrap().to_string()
    };
    if let Err(e) = run(&b, commands(&archived)) {
        return outcome(false, e);
    }
    let (fa, fb) = (files(&a), files(&b));
    let mut fa_cmp = fa.clone();
    fa_cmp.remove(Path::new("run.json"));
    let differing: Vec<String> =
        fa_cmp.iter().filter(|(k, v)| fb.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    let kinds = ["png", "ckpt", "json", "md", "csv"];
    let counted: usize = fa_cmp.keys().filter(|k| k.extension().is_some_and(|e| kinds.contains(&e.to_str().unwrap()))).count();
    outcome(
        differing.is_empty() && fb.len() == fa_cmp.len(),
        if differing.is_empty() {
            format!("{counted} files (images, checkpoints, reports, configs, logs) byte-identical on rerun from archived configs")
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

fn main() {
    // `cargo test` passes harness flags; `--list` must print nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut rows: Vec<(u8, &str, Outcome, f64)> = Vec::new();
    println!("running acceptance criteria");
    let mut timed = |id: u8, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let secs = t0.elapsed().as_secs_f64();
        println!("{} criterion {id}: {name}: {} [{secs:.1}s]", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        rows.push((id, name, o, secs));
    };
    timed(1, "forward-marginal equivalence", &|| {
        let t0 = Instant::now();
        let mut o = c1_forward_marginal();
        let secs = t0.elapsed().as_secs_f64();
        o.passed &= secs < 10.0;
        o
    });
    timed(2, "gradient correctness", &|| {
        let t0 = Instant::now();
        let mut o = c2_gradients();
        o.passed &= t0.elapsed().as_secs_f64() < 60.0;
        o
    });
    timed(3, "sampler exactness", &|| {
        let t0 = Instant::now();
        let mut o = c3_sampler_exactness();
        o.passed &= t0.elapsed().as_secs_f64() < 5.0;
        o
    });
    timed(4, "guidance algebra", &c4_guidance);
    timed(5, "prompt codec", &|| {
        let t0 = Instant::now();
        let mut o = c5_prompt_codec();
        o.passed &= t0.elapsed().as_secs_f64() < 1.0;
        o
    });
    let t0 = Instant::now();
    let e2e = end_to_end();
    let e2e_secs = t0.elapsed().as_secs_f64();
    timed(6, "autoencoder fidelity", &|| c6_autoencoder(&e2e));
    timed(7, "MMSE sweep", &|| c7_mmse_sweep(&e2e));
    timed(8, "MR ablation", &|| c8_ablation(&e2e));
    timed(9, "reproducibility", &c9_reproducibility);
    if let Ok(e) = &e2e {
        let stages: Vec<String> = e.times.iter().map(|(k, v)| format!("{k} {v:.0}s")).collect();
        println!("end-to-end artifacts: {} ({e2e_secs:.0}s this run; stages: {})", e.dir.display(), stages.join(", "));
    }
    let failed = rows.iter().filter(|r| !r.2.passed).count();
    println!("{} of {} criteria passed", rows.len() - failed, rows.len());
    if failed > 0 && std::env::var_os("TAUGEN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

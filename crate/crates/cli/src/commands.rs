//! One function per verb. Each loads its config, does its work, writes a
//! run directory and prints a short summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use bridgeprompt::backbone;
use bridgeprompt::bridges::{Trajectory, TrajectoryKind};
use bridgeprompt::checkpoint::{self, from_limbs, META_HASH};
use bridgeprompt::evaluation::{
    self, bridge_comparison, mean_finite, mismatch_diagnostic, mse_psnr, sample_seed, training_state_self_score,
    DiagnosticConfig, Experiment,
};
use bridgeprompt::prompts::encode;
use bridgeprompt::sampler::{restore as run_sampler, Conditioned};
use bridgeprompt::toyworld::{make_pairs, DegradationKind};
use bridgeprompt::training::{train_prompt as train, TrainReport};
use bridgeprompt::{Backbone, Conditioner, PromptBank, VariantTag};

use crate::artifacts::{from_image, hex, line_plot, num, read_pgm, smooth, to_image, RunDir};
use crate::config::{Config, Loaded};
use crate::RunArgs;

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;

fn seeds(cfg: &Config) -> [(&'static str, u64); 3] {
    [
        ("seed", cfg.seed),
        ("backbone_seed", cfg.backbone.seed),
        ("conditioner_seed", cfg.conditioner.seed),
    ]
}

fn load_config(run: &RunArgs) -> Result<Loaded> {
    let loaded = Config::load(&run.config)?;
    if let Some(seed) = loaded.seed_override {
        println!("seed overridden from environment: {seed}");
    }
    Ok(loaded)
}

fn load_backbone(path: &Path) -> Result<(Backbone, Conditioner)> {
    let tensors = checkpoint::load(path).with_context(|| format!("cannot load backbone {}", path.display()))?;
    checkpoint::load_backbone(&tensors).with_context(|| format!("backbone {} failed verification", path.display()))
}

fn load_bank(path: &Path) -> Result<PromptBank> {
    let tensors = checkpoint::load(path).with_context(|| format!("cannot load bank {}", path.display()))?;
    Ok(checkpoint::load_bank(&tensors)?)
}

fn image_side(backbone: &Backbone) -> usize {
    (backbone.config().input_dim as f64).sqrt().round() as usize
}

fn loss_rows(curve: &[f64]) -> Vec<Vec<String>> {
    curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), num(*l)])
        .collect()
}

fn plot_window(len: usize) -> usize {
    (len / 200).max(1)
}

pub fn pretrain(run: &RunArgs) -> Result<()> {
    let loaded = load_config(run)?;
    let cfg = &loaded.config;
    let mut dir = RunDir::create(&run.out, run.force)?;
    let conditioner = Conditioner::new(cfg.conditioner_config())?;
    let started = Instant::now();
    let pre = backbone::pretrain(cfg.backbone_config(), &conditioner)?;
    let path = dir.path("backbone.bprm")?;
    let sum = checkpoint::save(&path, &checkpoint::backbone_tensors(&pre.backbone, &conditioner)?)?;
    dir.csv("pretrain_loss.csv", &["step", "loss"], &loss_rows(&pre.losses))?;
    dir.pgm(
        "pretrain_loss.pgm",
        &line_plot(&[smooth(&pre.losses, plot_window(pre.losses.len()))], PLOT_W, PLOT_H),
    )?;
    let tail = &pre.losses[pre.losses.len().saturating_sub(100)..];
    println!(
        "pretrained {} steps in {:.1}s: loss {:.4} -> {:.4} (mean of last {})",
        pre.losses.len(),
        started.elapsed().as_secs_f64(),
        pre.losses[0],
        tail.iter().sum::<f64>() / tail.len() as f64,
        tail.len()
    );
    println!(
        "frozen backbone hash {}, checkpoint checksum {}",
        hex(pre.backbone.weights().hash()),
        hex(sum)
    );
    dir.finish("pretrain", &loaded.source, &seeds(cfg))?;
    println!("wrote {}", run.out.display());
    Ok(())
}

/// Command-line replacements for `[train]` fields.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub trajectory: Option<TrajectoryKind>,
    pub degradation: Option<DegradationKind>,
    pub variant: Option<VariantTag>,
}

fn passed(ok: bool) -> &'static str {
    if ok {
        "passed"
    } else {
        "FAILED"
    }
}

fn report_rows(report: &TrainReport, severity: f64) -> Vec<Vec<String>> {
    let c = &report.config;
    let gate = match report.gate_zero_neutral {
        Some(ok) => passed(ok).to_string(),
        None => "n/a".to_string(),
    };
    [
        ("trajectory", c.trajectory.to_string()),
        ("variant", c.variant.to_string()),
        ("degradation", c.degradation.to_string()),
        ("severity", num(severity)),
        ("iterations", c.iterations.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("learning_rate", num(c.learning_rate)),
        ("t0", num(c.t0)),
        ("eta", num(c.eta)),
        ("seed", c.seed.to_string()),
        ("parameters", report.prompt.parameter_count().to_string()),
        ("initial_loss", num(report.initial_loss())),
        ("final_loss", num(report.final_loss())),
        ("tail_mean_100", num(report.tail_mean(100))),
        ("backbone_hash_before", hex(report.backbone_hash_before)),
        ("backbone_hash_after", hex(report.backbone_hash_after)),
        ("encoder_hash_before", hex(report.encoder_hash_before)),
        ("encoder_hash_after", hex(report.encoder_hash_after)),
        ("frozen_contract", passed(report.frozen_contract_held()).to_string()),
        ("gate_zero_neutral", gate),
    ]
    .into_iter()
    .map(|(k, v)| vec![k.to_string(), v])
    .collect()
}

pub fn train_prompt(run: &RunArgs, backbone_path: &Path, bank_path: Option<&Path>, overrides: Overrides) -> Result<()> {
    let loaded = load_config(run)?;
    let cfg = &loaded.config;
    let (backbone, conditioner) = load_backbone(backbone_path)?;
    let mut bank = match bank_path {
        Some(p) => load_bank(p)?,
        None => PromptBank::new(),
    };
    let mut tc = cfg.train_config(cfg.seed);
    tc.trajectory = overrides.trajectory.unwrap_or(tc.trajectory);
    tc.degradation = overrides.degradation.unwrap_or(tc.degradation);
    tc.variant = overrides.variant.unwrap_or(tc.variant);
    let degradation = cfg.degradation_for(tc.degradation)?;
    let train_set = make_pairs(degradation, image_side(&backbone), cfg.train.train_size, cfg.seed)?;

    let mut dir = RunDir::create(&run.out, run.force)?;
    let started = Instant::now();
    let report = train(&tc, &train_set, &mut bank, &backbone, &conditioner)
        .with_context(|| format!("training the {} prompt for `{}` failed", tc.trajectory, tc.degradation))?;
    let bank_file = dir.path("bank.bprm")?;
    let sum = checkpoint::save(&bank_file, &checkpoint::bank_tensors(&bank)?)?;
    dir.csv("train_loss.csv", &["iteration", "loss"], &loss_rows(&report.loss_curve))?;
    dir.csv("train_report.csv", &["field", "value"], &report_rows(&report, degradation.severity()))?;
    dir.pgm(
        "train_loss.pgm",
        &line_plot(&[smooth(&report.loss_curve, plot_window(report.loss_curve.len()))], PLOT_W, PLOT_H),
    )?;

    println!(
        "trained {} {} prompt for `{}` in {:.1}s: loss {:.4} -> {:.4} (mean of last 100)",
        tc.trajectory,
        tc.variant,
        tc.degradation,
        started.elapsed().as_secs_f64(),
        report.initial_loss(),
        report.tail_mean(100)
    );
    println!(
        "frozen-hash check: {} (backbone {}, encoder {})",
        passed(report.frozen_contract_held()),
        hex(report.backbone_hash_after),
        hex(report.encoder_hash_after)
    );
    if let Some(ok) = report.gate_zero_neutral {
        println!("gate-zero neutrality: {} (initial context equals e_null bitwise)", passed(ok));
    }
    let kinds: Vec<&str> = bank.kinds().map(|k| k.label()).collect();
    println!("bank [{}] checksum {}", kinds.join(", "), hex(sum));
    dir.finish("train-prompt", &loaded.source, &seeds(cfg))?;
    Ok(())
}

struct RestoreInput {
    name: String,
    degraded: bridgeprompt::numerics::Tensor,
    clean: Option<bridgeprompt::numerics::Tensor>,
}

pub fn restore(
    run: &RunArgs,
    backbone_path: &Path,
    bank_path: &Path,
    trajectory: Option<TrajectoryKind>,
    mix: &[DegradationKind],
    inputs: &[PathBuf],
) -> Result<()> {
    let loaded = load_config(run)?;
    let cfg = &loaded.config;
    let (backbone, conditioner) = load_backbone(backbone_path)?;
    let bank = load_bank(bank_path)?;
    let kinds = if mix.is_empty() {
        vec![cfg.degradation_kind()?]
    } else {
        mix.to_vec()
    };
    let contexts = kinds
        .iter()
        .map(|&k| Ok(encode(bank.require(k)?, &conditioner, backbone.e_null())?))
        .collect::<Result<Vec<_>>>()?;
    let kind = trajectory.map_or_else(|| cfg.trajectory(), Ok)?;
    let sampler = cfg.sampler_config(kind, cfg.seed)?;

    let samples: Vec<RestoreInput> = if inputs.is_empty() {
        let exp = Experiment {
            degradation: cfg.degradation_for(kinds[0])?,
            ..cfg.experiment()?
        };
        let (_, test) = exp.data(&backbone, cfg.seed)?;
        test.into_iter()
            .enumerate()
            .map(|(i, p)| RestoreInput {
                name: format!("sample_{i:04}"),
                degraded: p.degraded,
                clean: Some(p.clean),
            })
            .collect()
    } else {
        inputs
            .iter()
            .map(|p| {
                let t = from_image(&read_pgm(p)?);
                ensure!(
                    t.len() == backbone.config().input_dim,
                    "{} has {} pixels; the backbone expects {}",
                    p.display(),
                    t.len(),
                    backbone.config().input_dim
                );
                let name = p.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
                Ok(RestoreInput {
                    name,
                    degraded: t,
                    clean: None,
                })
            })
            .collect::<Result<_>>()?
    };

    let mut dir = RunDir::create(&run.out, run.force)?;
    let field = Conditioned::new(&backbone, contexts)?;
    let mut rows = Vec::new();
    let (mut mses, mut psnrs, mut input_mses) = (Vec::new(), Vec::new(), Vec::new());
    let mut nfe = 0;
    for (i, sample) in samples.iter().enumerate() {
        let mut cfg_i = sampler.clone();
        cfg_i.seed = sample_seed(sampler.seed, i);
        let out = run_sampler(&sample.degraded, &field, &cfg_i)?;
        nfe += out.nfe;
        dir.pgm(&format!("images/{}.pgm", sample.name), &to_image(&out.output)?)?;
        match &sample.clean {
            Some(clean) => {
                let (mse, psnr) = mse_psnr(&out.output, clean)?;
                let (input_mse, _) = mse_psnr(&sample.degraded, clean)?;
                rows.push(vec![sample.name.clone(), num(input_mse), num(mse), num(psnr)]);
                mses.push(mse);
                psnrs.push(psnr);
                input_mses.push(input_mse);
            }
            None => rows.push(vec![sample.name.clone(), String::new(), String::new(), String::new()]),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if !mses.is_empty() {
        let psnr = mean_finite(&psnrs).unwrap_or(f64::INFINITY);
        rows.push(vec!["mean".into(), num(mean(&input_mses)), num(mean(&mses)), num(psnr)]);
        let improved = mses.iter().zip(&input_mses).filter(|(m, i)| m < i).count();
        println!(
            "restored {} inputs with {kind}: mse {:.5} (input {:.5}), psnr {:.2} dB, improved {improved}/{}",
            samples.len(),
            mean(&mses),
            mean(&input_mses),
            psnr,
            mses.len()
        );
    } else {
        println!("restored {} inputs with {kind}", samples.len());
    }
    dir.csv("metrics.csv", &["sample", "input_mse", "mse", "psnr"], &rows)?;
    let labels: Vec<&str> = kinds.iter().map(|k| k.label()).collect();
    println!("prompts [{}], {} steps, NFE {nfe}", labels.join(", "), sampler.steps);
    dir.finish("restore", &loaded.source, &seeds(cfg))?;
    Ok(())
}

pub fn t0_sweep(run: &RunArgs, backbone_path: &Path) -> Result<()> {
    let loaded = load_config(run)?;
    let cfg = &loaded.config;
    let (backbone, conditioner) = load_backbone(backbone_path)?;
    let exp = cfg.experiment()?;
    let candidates = &cfg.experiment.t0_candidates;
    let mut dir = RunDir::create(&run.out, run.force)?;
    let sweep = evaluation::t0_sweep(&exp, candidates, &backbone, &conditioner)?;

    let mut rows = Vec::new();
    for (i, (&t0, arm)) in candidates.iter().zip(&sweep.arms).enumerate() {
        let curve = &arm.report.as_ref().expect("sweep arms carry reports").loss_curve;
        dir.csv(&format!("arms/t0_{t0}/train_loss.csv"), &["iteration", "loss"], &loss_rows(curve))?;
        rows.push(vec![
            num(t0),
            num(arm.mse),
            num(arm.psnr),
            num(arm.input_mse),
            num(sweep.scores.scores[i]),
        ]);
    }
    dir.csv("t0_sweep.csv", &["t0", "mse", "psnr", "input_mse", "score"], &rows)?;
    let points: Vec<(f64, f64)> = candidates.iter().copied().zip(sweep.scores.scores.iter().copied()).collect();
    dir.pgm("t0_sweep.pgm", &line_plot(&[points], PLOT_W, PLOT_H))?;

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sweep.scores.scores[b].total_cmp(&sweep.scores.scores[a]));
    let mut lines = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        lines.push(format!(
            "{}. T0 {:<4} score {:.4}  mse {:.5}  psnr {:.2} dB",
            rank + 1,
            candidates[i],
            sweep.scores.scores[i],
            sweep.arms[i].mse,
            sweep.arms[i].psnr
        ));
    }
    lines.extend(sweep.scores.warnings.iter().map(|w| format!("warning: {w}")));
    lines.push(format!("best T0 at this scale: {} (reference choice 0.4)", sweep.best_t0()));
    let text = lines.join("\n") + "\n";
    print!("{text}");
    dir.write("report.txt", text.as_bytes())?;
    dir.finish("ablate --t0-sweep", &loaded.source, &seeds(cfg))?;
    Ok(())
}

pub fn bridge_compare(run: &RunArgs, backbone_path: &Path) -> Result<()> {
    let loaded = load_config(run)?;
    let cfg = &loaded.config;
    let (backbone, conditioner) = load_backbone(backbone_path)?;
    let exp = cfg.experiment()?;
    let mut dir = RunDir::create(&run.out, run.force)?;
    let (report, arms) = bridge_comparison(&exp, &backbone, &conditioner)?;

    let mut rows = Vec::new();
    let mut series = Vec::new();
    for kind in TrajectoryKind::ALL {
        let curves: Vec<&Vec<f64>> = arms
            .iter()
            .filter(|a| a.trajectory == kind)
            .filter_map(|a| a.report.as_ref().map(|r| &r.loss_curve))
            .collect();
        if let Some(first) = curves.first() {
            let mean: Vec<f64> = (0..first.len())
                .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
                .collect();
            series.push(smooth(&mean, plot_window(mean.len())));
        }
    }
    for arm in &arms {
        let r = arm.report.as_ref().expect("comparison arms carry reports");
        dir.csv(
            &format!("arms/{}_seed{}/train_loss.csv", arm.trajectory, arm.seed),
            &["iteration", "loss"],
            &loss_rows(&r.loss_curve),
        )?;
        rows.push(vec![
            arm.trajectory.to_string(),
            arm.seed.to_string(),
            num(arm.mse),
            num(arm.psnr),
            num(arm.input_mse),
            num(r.initial_loss()),
            num(r.tail_mean(100)),
        ]);
    }
    dir.csv(
        "bridge_arms.csv",
        &["trajectory", "seed", "mse", "psnr", "input_mse", "initial_loss", "final_loss"],
        &rows,
    )?;
    let summary: Vec<Vec<String>> = report
        .summaries
        .iter()
        .map(|s| vec![s.trajectory.to_string(), num(s.mean_mse), num(s.mean_psnr), s.seeds.to_string()])
        .collect();
    dir.csv("bridge_summary.csv", &["trajectory", "mean_mse", "mean_psnr", "seeds"], &summary)?;
    dir.pgm("bridge_loss.pgm", &line_plot(&series, PLOT_W, PLOT_H))?;
    let text = format!("{report}\n");
    print!("{text}");
    dir.write("verdict.txt", text.as_bytes())?;
    dir.finish("ablate --bridge-compare", &loaded.source, &seeds(cfg))?;
    Ok(())
}

pub fn diagnose(run: &RunArgs, backbone_path: &Path) -> Result<()> {
    let loaded = load_config(run)?;
    let cfg = &loaded.config;
    let (backbone, conditioner) = load_backbone(backbone_path)?;
    let exp = cfg.experiment()?;
    let seed = exp.seeds[0];
    let (train_set, test_set) = exp.data(&backbone, seed)?;
    let inputs = &test_set[..cfg.experiment.diagnostic_inputs.min(test_set.len())];
    let mut dir = RunDir::create(&run.out, run.force)?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for kind in TrajectoryKind::ALL {
        let mut bank = PromptBank::new();
        let report = train(&exp.train_config(kind, exp.t0, seed), &train_set, &mut bank, &backbone, &conditioner)?;
        let context = encode(&report.prompt, &conditioner, backbone.e_null())?;
        let dc = DiagnosticConfig {
            sampler: cfg.sampler_config(kind, seed)?,
            monte_carlo: cfg.experiment.monte_carlo,
            seed,
        };
        let curve = mismatch_diagnostic(&dc, &backbone, &context, &train_set, inputs)?;
        for (step, (t, d)) in curve.times.iter().zip(&curve.divergence).enumerate() {
            rows.push(vec![kind.to_string(), step.to_string(), num(*t), num(*d)]);
        }
        series.push(curve.divergence.iter().enumerate().map(|(i, &d)| (i as f64, d)).collect());
        println!("{kind:<6} mean divergence {:.4}", curve.mean());
        summary.push(vec![kind.to_string(), num(curve.mean()), num(report.tail_mean(100))]);
    }
    dir.csv("mismatch.csv", &["trajectory", "step", "time", "divergence"], &rows)?;
    dir.csv("mismatch_summary.csv", &["trajectory", "mean_divergence", "final_loss"], &summary)?;
    dir.pgm("mismatch.pgm", &line_plot(&series, PLOT_W, PLOT_H))?;

    let ebr = Trajectory::from_kind(TrajectoryKind::Ebr, exp.t0, exp.eta)?;
    let grid = cfg.sampler_config(TrajectoryKind::Ebr, seed)?.grid();
    let mut self_rows = Vec::new();
    let mut total = 0.0;
    for (i, &t) in grid[..grid.len() - 1].iter().enumerate() {
        let s = training_state_self_score(&ebr, &train_set, t, cfg.experiment.monte_carlo, 64, sample_seed(seed, i))?;
        total += s;
        self_rows.push(vec![num(t), num(s)]);
    }
    let mean_self = total / (grid.len() - 1) as f64;
    dir.csv("self_score.csv", &["time", "mean_abs_z"], &self_rows)?;
    println!("training-state self score {mean_self:.4} (Gaussian reference 0.798)");
    dir.finish("diagnose", &loaded.source, &seeds(cfg))?;
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = checkpoint::header(&bytes)?;
    println!(
        "{}: BPRM v{}, {} tensors, checksum {}",
        path.display(),
        header.version,
        header.entries.len(),
        hex(header.checksum)
    );
    let mut values = 0usize;
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        values += n;
        println!("  {:<32} {:?}", e.name, e.shape);
    }
    println!("  {values} values");
    if header.entries.iter().any(|e| e.name == META_HASH) {
        let tensors = checkpoint::decode(&bytes)?;
        println!("  frozen backbone hash {}", hex(from_limbs(&tensors[META_HASH])?));
    }
    Ok(())
}

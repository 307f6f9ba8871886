//! End-to-end runs of the `bridgeprompt` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
seed = 5
[backbone]
input_dim = 36
hidden_dim = 16
hidden_layers = 1
attention_dim = 8
time_embed_dim = 8
pretrain_steps = 40
pretrain_batch = 4
[conditioner]
tokens = 3
token_dim = 4
context_dim = 6
encoder_hidden = 6
[train]
iterations = 15
train_size = 8
[sampler]
steps = 4
test_size = 5
[experiment]
seeds = [1, 2]
t0_candidates = [0.2, 0.4]
monte_carlo = 30
diagnostic_inputs = 2
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(w.path("tiny.toml"), TINY).unwrap();
        w
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bridgeprompt"));
        cmd.current_dir(self.dir.path()).args(args).env_remove("BRIDGEPROMPT_SEED");
        if let Some(s) = seed {
            cmd.env("BRIDGEPROMPT_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pretrain(&self, out: &str) {
        self.ok(&["pretrain", "-c", "tiny.toml", "-o", out]);
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["train-prompt", "-c", "tiny.toml", "-o", out, "--backbone", "pre/backbone.bprm"];
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn missing_config_fails() {
    let w = Workspace::new();
    let out = w.run(&["pretrain", "-c", "absent.toml", "-o", "pre"]);
    assert!(!out.status.success());
    assert!(!w.path("pre").exists());
}

#[test]
fn unknown_key_is_named_in_the_error() {
    let w = Workspace::new();
    fs::write(w.path("typo.toml"), "[sampler]\nstep = 4\n").unwrap();
    let out = w.run(&["pretrain", "-c", "typo.toml", "-o", "pre"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn pretrain_is_reproducible_and_logs_every_step() {
    let w = Workspace::new();
    w.pretrain("a");
    w.pretrain("b");
    assert_eq!(bytes(&w.path("a/backbone.bprm")), bytes(&w.path("b/backbone.bprm")));
    assert_eq!(bytes(&w.path("a/manifest.csv")), bytes(&w.path("b/manifest.csv")));
    assert_eq!(csv_rows(&w.path("a/pretrain_loss.csv")).len(), 40);
    assert_eq!(fs::read_to_string(w.path("a/config.toml")).unwrap(), TINY);
    assert_eq!(&bytes(&w.path("a/pretrain_loss.pgm"))[..2], b"P5");
    let run = fs::read_to_string(w.path("a/run.toml")).unwrap();
    assert!(run.contains("version = ") && run.contains("seed = 5"));
}

#[test]
fn seed_override_from_environment() {
    let w = Workspace::new();
    w.pretrain("pre");
    let args = ["train-prompt", "-c", "tiny.toml", "--backbone", "pre/backbone.bprm", "-o"];
    let a = w.run_env(&[&args[..], &["a"]].concat(), Some("11"));
    let b = w.run_env(&[&args[..], &["b"]].concat(), None);
    assert!(a.status.success() && b.status.success());
    assert!(fs::read_to_string(w.path("a/run.toml")).unwrap().contains("seed = 11"));
    assert_ne!(bytes(&w.path("a/bank.bprm")), bytes(&w.path("b/bank.bprm")));
    let bad = w.run_env(&[&args[..], &["c"]].concat(), Some("many"));
    assert!(!bad.status.success());
}

#[test]
fn train_prompt_fills_the_bank_reproducibly() {
    let w = Workspace::new();
    w.pretrain("pre");
    let log = w.train("t1", &["--trajectory", "ebr", "--degradation", "veil"]);
    assert!(log.contains("frozen-hash check: passed"), "{log}");
    w.train("t2", &["--trajectory", "ebr", "--degradation", "veil"]);
    assert_eq!(bytes(&w.path("t1/bank.bprm")), bytes(&w.path("t2/bank.bprm")));
    assert_eq!(csv_rows(&w.path("t1/train_loss.csv")).len(), 15);

    let inspect = w.ok(&["inspect", "t1/bank.bprm"]);
    assert!(inspect.contains("bank.veil.embedding.context"), "{inspect}");

    let log = w.train("t3", &["--bank", "t1/bank.bprm", "--degradation", "gamma", "--variant", "residual"]);
    assert!(log.contains("gate-zero neutrality: passed"), "{log}");
    let inspect = w.ok(&["inspect", "t3/bank.bprm"]);
    assert!(inspect.contains("bank.gamma.residual.gate") && inspect.contains("bank.veil"));
    let report = csv_rows(&w.path("t3/train_report.csv"));
    let field = |k: &str| report.iter().find(|r| r[0] == k).unwrap()[1].clone();
    assert_eq!(field("frozen_contract"), "passed");
    assert_eq!(field("gate_zero_neutral"), "passed");
    assert_eq!(field("backbone_hash_before"), field("backbone_hash_after"));

    let text = w.run(&["train-prompt", "-c", "tiny.toml", "-o", "t4", "--backbone", "pre/backbone.bprm", "--variant", "text"]);
    assert!(!text.status.success());
}

#[test]
fn restore_outputs_metrics_and_images() {
    let w = Workspace::new();
    w.pretrain("pre");
    w.train("t", &[]);
    let base = ["restore", "-c", "tiny.toml", "--backbone", "pre/backbone.bprm", "--bank", "t/bank.bprm"];
    w.ok(&[&base[..], &["-o", "single"]].concat());
    w.ok(&[&base[..], &["-o", "mixed", "--mix", "veil"]].concat());
    let images: Vec<_> = fs::read_dir(w.path("single/images")).unwrap().collect();
    assert_eq!(images.len(), 5);
    for entry in images {
        let name = entry.unwrap().file_name();
        let rel = format!("images/{}", name.to_string_lossy());
        assert_eq!(bytes(&w.path("single").join(&rel)), bytes(&w.path("mixed").join(&rel)));
    }
    assert_eq!(bytes(&w.path("single/metrics.csv")), bytes(&w.path("mixed/metrics.csv")));

    let rows = csv_rows(&w.path("single/metrics.csv"));
    let (samples, aggregate) = rows.split_at(rows.len() - 1);
    assert_eq!(samples.len(), 5);
    assert_eq!(aggregate[0][0], "mean");
    let psnr: Vec<f64> = samples.iter().map(|r| r[3].parse().unwrap()).collect();
    let finite: Vec<f64> = psnr.into_iter().filter(|p: &f64| p.is_finite()).collect();
    let want = finite.iter().sum::<f64>() / finite.len() as f64;
    let got: f64 = aggregate[0][3].parse().unwrap();
    assert!((got - want).abs() <= 1e-12 * want.abs());

    let missing = w.run(&[&base[..], &["-o", "m", "--mix", "veil,blur"]].concat());
    assert!(!missing.status.success());
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("blur") && err.contains("available: veil"), "{err}");

    w.ok(&[&base[..], &["-o", "files", "--input", "single/images/sample_0000.pgm", "single/images/sample_0001.pgm"]].concat());
    assert_eq!(fs::read_dir(w.path("files/images")).unwrap().count(), 2);
}

#[test]
fn ablations_guard_their_directories() {
    let w = Workspace::new();
    w.pretrain("pre");
    let sweep = ["ablate", "-c", "tiny.toml", "--backbone", "pre/backbone.bprm", "-o", "sw", "--t0-sweep"];
    let log = w.ok(&sweep);
    assert!(log.contains("best T0"), "{log}");
    assert_eq!(csv_rows(&w.path("sw/t0_sweep.csv")).len(), 2);
    assert!(!w.run(&sweep).status.success());
    w.ok(&[&sweep[..], &["--force"]].concat());

    fs::write(w.path("one.toml"), TINY.replace("t0_candidates = [0.2, 0.4]", "t0_candidates = [0.4]")).unwrap();
    let single = w.run(&["ablate", "-c", "one.toml", "--backbone", "pre/backbone.bprm", "-o", "one", "--t0-sweep"]);
    assert!(!single.status.success());

    let log = w.ok(&["ablate", "-c", "tiny.toml", "--backbone", "pre/backbone.bprm", "-o", "bc", "--bridge-compare"]);
    for seed in [1, 2] {
        assert!(log.contains(&format!("seed {seed}: mse(ebr) < mse(naive)")), "{log}");
    }
    assert_eq!(csv_rows(&w.path("bc/bridge_arms.csv")).len(), 6);
    assert!(w.path("bc/arms/ebr_seed2/train_loss.csv").exists());

    let neither = w.run(&["ablate", "-c", "tiny.toml", "--backbone", "pre/backbone.bprm", "-o", "x"]);
    assert!(!neither.status.success());
}

#[test]
fn diagnose_writes_curves_for_each_trajectory() {
    let w = Workspace::new();
    w.pretrain("pre");
    w.ok(&["diagnose", "-c", "tiny.toml", "--backbone", "pre/backbone.bprm", "-o", "dg"]);
    let rows = csv_rows(&w.path("dg/mismatch.csv"));
    assert_eq!(rows.len(), 3 * 4);
    let summary = csv_rows(&w.path("dg/mismatch_summary.csv"));
    let kinds: Vec<&str> = summary.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(kinds, ["naive", "ddbm", "ebr"]);
}

#[test]
fn tampered_backbone_is_rejected() {
    let w = Workspace::new();
    w.pretrain("pre");
    let mut raw = bytes(&w.path("pre/backbone.bprm"));
    let mid = raw.len() / 2;
    raw[mid] ^= 0x40;
    fs::write(w.path("bad.bprm"), raw).unwrap();
    let out = w.run(&["train-prompt", "-c", "tiny.toml", "-o", "t", "--backbone", "bad.bprm"]);
    assert!(!out.status.success());
    assert!(!w.run(&["inspect", "bad.bprm"]).status.success());
}

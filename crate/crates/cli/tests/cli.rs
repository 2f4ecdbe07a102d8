use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metanode::gradnet::load_checkpoint;
use metanode::metatrain::init_seed;
use metanode::GradNetParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const TINY: &str = r#"
[gradnet]
num_modules = 2
hidden_dim = 8
embed_dim = 8
heads = 2
head_dim = 4

[solver]
num_steps = 4

[train]
episodes_per_epoch = 4
m_query = 3
lr_decay_epochs = [1]
val_episodes = 3

[train.solver]
num_steps = 2

[eval]
episodes = 12
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metanode")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Base and novel feature files in d=6 plus the tiny config.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        let f = Self { dir };
        ok(&[
            "synth", "--classes", "8", "--dim", "6", "--per-class", "20", "--seed", "3",
            "--novel-classes", "6", "--out", p(&f.path("base.fv")), "--novel-out", p(&f.path("novel.fv")),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        self.path("tiny.toml").to_str().unwrap().to_string()
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(name);
        let cfg = self.config();
        let base = self.path("base.fv");
        let mut args = vec!["train", "--config", &cfg, "--data", p(&base), "--out-checkpoint", p(&ckpt)];
        args.extend_from_slice(extra);
        ok(&args);
        ckpt
    }

    fn files(&self) -> Vec<String> {
        let mut names: Vec<String> =
            fs::read_dir(self.dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        names
    }
}

#[test]
fn synth_writes_one_line_per_sample_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.fv");
    let b = dir.path().join("b.fv");
    let args = |out: &Path| {
        ok(&["synth", "--classes", "20", "--dim", "16", "--per-class", "50", "--noise", "0.35", "--seed", "7", "--out", p(out)]);
    };
    args(&a);
    args(&b);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let cfg = fs::read_to_string(dir.path().join("a.fv.run.toml")).unwrap();
    assert!(cfg.contains("classes = 20"));
    assert!(cfg.contains("seed = 7"));
}

#[test]
fn synth_rejects_single_class_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.fv");
    let r = run(&["synth", "--classes", "1", "--out", p(&out)]);
    assert!(!r.status.success());
    assert!(!r.stderr.is_empty());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn synth_novel_split_keeps_ids_apart() {
    let f = Fixture::new();
    let base = fs::read_to_string(f.path("base.fv")).unwrap();
    let novel = fs::read_to_string(f.path("novel.fv")).unwrap();
    assert_eq!(base.lines().count(), 160);
    assert_eq!(novel.lines().count(), 120);
    let id = |l: &str| l.split(',').next().unwrap().parse::<u32>().unwrap();
    assert!(base.lines().all(|l| id(l) < 8));
    assert!(novel.lines().all(|l| (8..14).contains(&id(l))));
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let f = Fixture::new();
    let ckpt = f.train("init.ckpt", &["--epochs", "0", "--seed", "5"]);
    let (cfg, params) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(cfg.feature_dim, 6);
    assert_eq!(cfg.hidden_dim, 8);
    let expected = GradNetParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(init_seed(5))).unwrap();
    assert_eq!(params, expected);
    let log = fs::read_to_string(f.path("init.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_log_has_one_line_per_epoch_and_reruns_match() {
    let f = Fixture::new();
    let a = f.train("a.ckpt", &["--epochs", "3", "--threads", "1"]);
    let b = f.train("b.ckpt", &["--epochs", "3", "--threads", "1"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(f.path("a.ckpt.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "epoch,lr,mean_loss,val_accuracy,divergences");
    let lrs: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(lrs, ["0.001", "0.0001", "0.0001"]);
    let cfg = fs::read_to_string(f.path("a.ckpt.run.toml")).unwrap();
    assert!(cfg.contains("epochs = 3"));
    assert!(cfg.contains("feature_dim = 6"));
}

#[test]
fn validation_file_fills_log_column() {
    let f = Fixture::new();
    let novel = f.path("novel.fv");
    f.train("v.ckpt", &["--epochs", "1", "--val", p(&novel)]);
    let log = fs::read_to_string(f.path("v.ckpt.log.csv")).unwrap();
    let acc: f64 = log.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn full_preset_selects_long_schedule() {
    let f = Fixture::new();
    let ckpt = f.path("full.ckpt");
    let base = f.path("base.fv");
    ok(&["train", "--preset", "full", "--epochs", "0", "--data", p(&base), "--out-checkpoint", p(&ckpt)]);
    let cfg = fs::read_to_string(f.path("full.ckpt.run.toml")).unwrap();
    assert!(cfg.contains("learning_rate = 0.0001"));
    assert!(cfg.contains("lr_decay_epochs = [15, 30, 40]"));
    assert!(cfg.contains("hidden_dim = 512"));
}

#[test]
fn mean_eval_needs_no_checkpoint_and_is_reproducible() {
    let f = Fixture::new();
    let cfg = f.config();
    let novel = f.path("novel.fv");
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    for out in [&a, &b] {
        let stdout = ok(&["eval", "--config", &cfg, "--data", p(&novel), "--method", "mean", "--episodes", "30", "--out", p(out)]);
        assert!(stdout.contains("method: mean"));
        assert!(stdout.contains("episodes: 30"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 31);
    assert!(f.path("a.csv.run.toml").exists());
}

#[test]
fn metanode_eval_without_checkpoint_fails_cleanly() {
    let f = Fixture::new();
    let before = f.files();
    let novel = f.path("novel.fv");
    let out = f.path("r.csv");
    let r = run(&["eval", "--data", p(&novel), "--method", "metanode", "--out", p(&out)]);
    assert!(!r.status.success());
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert_eq!(f.files(), before);
}

#[test]
fn capacity_error_leaves_no_output() {
    let f = Fixture::new();
    let before = f.files();
    let novel = f.path("novel.fv");
    let out = f.path("r.csv");
    let r = run(&["eval", "--data", p(&novel), "--method", "mean", "--n-way", "7", "--out", p(&out)]);
    assert!(!r.status.success());
    assert_eq!(f.files(), before);
    let bad = f.path("bad.toml");
    fs::write(&bad, "[train]\nepoch = 1\n").unwrap();
    let r = run(&["eval", "--config", p(&bad), "--data", p(&novel), "--method", "mean"]);
    assert!(!r.status.success());
}

#[test]
fn analysis_reports_have_expected_shapes() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt", &["--epochs", "1"]);
    let cfg = f.config();
    let novel = f.path("novel.fv");
    let common = ["--config", &cfg, "--data", p(&novel), "--checkpoint", p(&ckpt)];

    let mut args = vec!["analyze", "--report", "trajectory", "--episode", "2"];
    args.extend_from_slice(&common);
    let traj = ok(&args);
    let lines: Vec<&str> = traj.lines().collect();
    assert_eq!(lines[0], "t,k,v0,v1,v2,v3,v4,v5");
    // 5 steps recorded (initial state plus 4) for 5 classes.
    assert_eq!(lines.len(), 1 + 5 * 5);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 8);
    }

    let conv_out = f.path("conv.csv");
    let mut args = vec!["analyze", "--report", "convergence", "--times", "1,5,10,20,40", "--out", p(&conv_out)];
    args.extend_from_slice(&common);
    ok(&args);
    let conv = fs::read_to_string(&conv_out).unwrap();
    let rows: Vec<&str> = conv.lines().collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0], "time,num_steps,accuracy,ci95,loss");
    // The last row uses the configured 4-step solver on the same episodes as eval.
    let mut args = vec!["eval", "--method", "metanode"];
    args.extend_from_slice(&common);
    let summary = ok(&args);
    let acc: f64 = rows[5].split(',').nth(2).unwrap().parse().unwrap();
    assert!(summary.contains(&format!("accuracy: {:.2}%", 100.0 * acc)), "{summary} vs {acc}");

    for report in ["proto-bias", "grad-bias"] {
        let mut args = vec!["analyze", "--report", report];
        args.extend_from_slice(&common);
        let text = ok(&args);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].split(',').all(|v| v.parse::<f64>().is_ok()));
    }
    let r = run(&["analyze", "--report", "convergence", "--data", p(&novel)]);
    assert!(!r.status.success());
}

#[test]
fn threads_one_reports_are_identical() {
    let f = Fixture::new();
    let ckpt = f.train("t.ckpt", &["--epochs", "1"]);
    let cfg = f.config();
    let novel = f.path("novel.fv");
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    for out in [&a, &b] {
        ok(&["eval", "--threads", "1", "--config", &cfg, "--data", p(&novel), "--checkpoint", p(&ckpt), "--out", p(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

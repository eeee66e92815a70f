use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdpl_core::data::{encode_idx_images, encode_idx_labels, RawImages};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cdpl-net"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Two visually distinct classes (blank vs. a bright block) in IDX form,
/// written as both the train and test split.
fn toy_data(dir: &Path, per_class: usize) {
    let (side, mut pixels, mut labels) = (28usize, Vec::new(), Vec::new());
    for i in 0..2 * per_class {
        let class = (i % 2) as u8;
        for r in 0..side {
            for c in 0..side {
                let on = class == 1 && (8..20).contains(&r) && (8..20).contains(&c);
                pixels.push(if on { 255 } else { (i * 7 % 13) as u8 });
            }
        }
        labels.push(class);
    }
    let images = RawImages {
        count: 2 * per_class,
        rows: side,
        cols: side,
        pixels,
    };
    for split in ["train", "t10k"] {
        fs::write(
            dir.join(format!("{split}-images-idx3-ubyte")),
            encode_idx_images(&images),
        )
        .unwrap();
        fs::write(
            dir.join(format!("{split}-labels-idx1-ubyte")),
            encode_idx_labels(&labels),
        )
        .unwrap();
    }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        toy_data(dir.path(), 8);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, out: &str, log: &str, extra: &[&str]) -> Output {
        let data = self.s("");
        let (out, log) = (self.s(out), self.s(log));
        let mut args = vec![
            "train",
            "--data-dir",
            &data,
            "--out",
            &out,
            "--log",
            &log,
            "--atoms-dpl3",
            "16",
            "--atoms-dpl6",
            "8",
            "--batch-size",
            "8",
        ];
        args.extend_from_slice(extra);
        run(&args)
    }

    /// A checkpoint trained until it separates the two toy classes.
    fn trained(&self) -> String {
        let o = self.train(
            "toy.ckpt",
            "toy.csv",
            &["--epochs", "30", "--lr", "0.003", "--seed", "1"],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        self.s("toy.ckpt")
    }
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = Fixture::new();
    let o = f.train("m.ckpt", "log.csv", &["--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("m.ckpt").is_file());
    let log = fs::read_to_string(f.path("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,mean_total_loss,mean_ce,mean_recon_dpl3,mean_recon_dpl6,train_acc"
    );
    assert_eq!(lines.len(), 4);
}

#[test]
fn same_seed_gives_identical_logs() {
    let f = Fixture::new();
    for name in ["a", "b"] {
        let o = f.train(
            &format!("{name}.ckpt"),
            &format!("{name}.csv"),
            &["--epochs", "2", "--seed", "11"],
        );
        assert!(o.status.success());
    }
    assert_eq!(
        fs::read(f.path("a.csv")).unwrap(),
        fs::read(f.path("b.csv")).unwrap()
    );
    assert_eq!(
        fs::read(f.path("a.ckpt")).unwrap(),
        fs::read(f.path("b.ckpt")).unwrap()
    );
}

#[test]
fn negative_beta_is_rejected_before_training() {
    let f = Fixture::new();
    fs::write(f.path("bad.json"), r#"{"atoms_dpl3":16,"atoms_dpl6":8,"beta":-1.0,"gamma":1.0,"lr":0.0003,"batch_size":8,"epochs":1,"seed":0,"no_dpl_layers":false,"stop_recon_grad_at_x":false,"class_count":10}"#).unwrap();
    let cfg = f.s("bad.json");
    let o = f.train("m.ckpt", "log.csv", &["--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta"));
    assert!(!f.path("m.ckpt").exists());
    // A flag overrides the config key.
    let o = f.train("m.ckpt", "log.csv", &["--config", &cfg, "--beta", "0.0001"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&[
            "features",
            "--checkpoint",
            "x",
            "--data-dir",
            "y",
            "--out",
            "z"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn missing_files_exit_three() {
    let f = Fixture::new();
    let ckpt = f.s("nope.ckpt");
    let data = f.s("");
    assert_eq!(
        run(&["eval", "--checkpoint", &ckpt, "--data-dir", &data])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(run(&["inspect", &ckpt]).status.code(), Some(3));
    let empty = tempfile::tempdir().unwrap();
    let out = f.s("m.ckpt");
    let o = run(&[
        "train",
        "--data-dir",
        empty.path().to_str().unwrap(),
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_features_and_clustering_on_a_trained_toy_model() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let data = f.s("");
    let cm = f.s("cm.csv");
    let o = run(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--data-dir",
        &data,
        "--confusion",
        &cm,
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "accuracy=1");
    let csv = fs::read_to_string(f.path("cm.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("8,0,0"));
    assert!(csv.ends_with("accuracy=1\n"));

    let out = f.s("p5.csv");
    let o = run(&[
        "features",
        "--checkpoint",
        &ckpt,
        "--data-dir",
        &data,
        "--layer",
        "P5",
        "--out",
        &out,
    ]);
    assert!(o.status.success());
    let feats = fs::read_to_string(f.path("p5.csv")).unwrap();
    let header = feats.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 401);
    assert!(header.starts_with("label,f0,f1,"));
    assert_eq!(feats.lines().count(), 17);

    let o = run(&[
        "cluster-ac",
        "--checkpoint",
        &ckpt,
        "--data-dir",
        &data,
        "--layer",
        "DPL6",
        "--runs",
        "20",
        "--samples",
        "16",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let field = |key: &str| -> f64 {
        text.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (mean, max) = (field("mean_ac="), field("max_ac="));
    assert!(mean <= max && max <= 1.0 && mean > 0.0, "{text}");

    let o = run(&[
        "features",
        "--checkpoint",
        &ckpt,
        "--data-dir",
        &data,
        "--layer",
        "C3",
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_reports_layer_counts() {
    let f = Fixture::new();
    let data = f.s("");
    let (ckpt, log) = (f.s("full.ckpt"), f.s("full.csv"));
    let o = run(&[
        "train",
        "--data-dir",
        &data,
        "--out",
        &ckpt,
        "--log",
        &log,
        "--epochs",
        "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["inspect", &ckpt]);
    assert!(o.status.success());
    let text = stdout(&o);
    for (layer, count) in [
        ("C1", 156),
        ("P2", 12),
        ("C4", 1516),
        ("P5", 32),
        ("F8", 48120),
        ("F9", 10164),
    ] {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(layer))
            .unwrap();
        assert_eq!(
            line.split_whitespace().nth(1),
            Some(count.to_string().as_str()),
            "{line}"
        );
    }
    assert!(text.contains("DPL3"));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = run(&["gradcheck", "--seed", "4"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    let b = run(&["gradcheck", "--seed", "4"]);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).lines().count(), 9);
}

#[test]
fn gradcheck_negative_control_names_the_layer() {
    let o = run(&["gradcheck", "--seed", "4", "--inject-fault", "conv"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("conv"), "{err}");
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("conv") && l.ends_with("FAIL")));
}

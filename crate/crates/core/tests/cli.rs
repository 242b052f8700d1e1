use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use specgrid::aggregation::{self, read_checkpoint, CheckpointStore, ModelCheckpoint};
use specgrid::dqn::QNetwork;

const TINY: &str = r#"{
  "total_steps": 80,
  "individual_steps": 40,
  "finetune_steps_per_network": 20,
  "finetune_loops": 1,
  "eval_steps": 30,
  "success_window": 10,
  "hyper": { "hidden": [8, 8], "batch_size": 8 }
}"#;

fn specgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specgrid"))
        .args(args)
        .env_remove(aggregation::STORE_ENV)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = specgrid(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.config(), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("config.json")
    }
}

fn train(f: &Fixture, command: &str, out: &str) -> PathBuf {
    let dir = f.path(out);
    ok(&[
        command,
        "--preset",
        "gen_train_1",
        "--config",
        s(&f.config()),
        "--seed",
        "9",
        "--out",
        s(&dir),
    ]);
    dir
}

fn csv(dir: &Path) -> Vec<u8> {
    fs::read(dir.join("metrics.csv")).unwrap()
}

#[test]
fn training_commands_are_byte_reproducible() {
    let f = Fixture::new();
    for command in ["train", "train-independent"] {
        let a = train(&f, command, &format!("{command}_a"));
        let b = train(&f, command, &format!("{command}_b"));
        assert_eq!(csv(&a), csv(&b), "{command}");
        assert_eq!(
            fs::read(a.join("checkpoints/model.wdqn")).unwrap(),
            fs::read(b.join("checkpoints/model.wdqn")).unwrap()
        );
        assert!(a.join("manifest.json").is_file() && a.join("summary.json").is_file());
    }
}

#[test]
fn train_multi_and_eval_are_byte_reproducible() {
    let f = Fixture::new();
    let runs: Vec<PathBuf> = ["m_a", "m_b"]
        .iter()
        .map(|name| {
            let out = f.path(name);
            ok(&[
                "train-multi",
                "--presets",
                "gen_train_1,gen_train_2",
                "--config",
                s(&f.config()),
                "--seed",
                "2",
                "--out",
                s(&out),
            ]);
            out
        })
        .collect();
    assert_eq!(csv(&runs[0]), csv(&runs[1]));
    assert_eq!(
        fs::read(runs[0].join("segments.json")).unwrap(),
        fs::read(runs[1].join("segments.json")).unwrap()
    );

    let ckpt = runs[0].join("checkpoints/final.wdqn");
    assert!(ckpt.is_file());
    let evals: Vec<PathBuf> = ["e_a", "e_b"]
        .iter()
        .map(|name| {
            let out = f.path(name);
            ok(&[
                "eval",
                "--checkpoint",
                s(&ckpt),
                "--preset",
                "unseen_10",
                "--config",
                s(&f.config()),
                "--out",
                s(&out),
            ]);
            out
        })
        .collect();
    assert_eq!(csv(&evals[0]), csv(&evals[1]));

    // Resuming from a stage checkpoint reaches the same final model.
    let resumed = f.path("m_resumed");
    let store = runs[1].join("checkpoints");
    ok(&[
        "train-multi",
        "--presets",
        "gen_train_1,gen_train_2",
        "--config",
        s(&f.config()),
        "--seed",
        "2",
        "--store",
        s(&store),
        "--resume",
        "phase2_aggregate",
        "--out",
        s(&resumed),
    ]);
    let a = read_checkpoint(&ckpt).unwrap();
    let b = read_checkpoint(&store.join("final.wdqn")).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn rerun_from_manifest_matches() {
    let f = Fixture::new();
    let first = train(&f, "train", "first");
    let again = f.path("again");
    ok(&[
        "train",
        "--from-manifest",
        s(&first.join("manifest.json")),
        "--out",
        s(&again),
    ]);
    assert_eq!(csv(&first), csv(&again));
    assert_eq!(
        fs::read(first.join("manifest.json")).unwrap(),
        fs::read(again.join("manifest.json")).unwrap()
    );
}

#[test]
fn aggregate_writes_the_mean() {
    let f = Fixture::new();
    let store = CheckpointStore::open(f.path("store")).unwrap();
    let dims = [11, 3, 3, 6];
    let a = QNetwork::from_flat(
        dims,
        (0..specgrid::dqn::param_count(dims))
            .map(|i| i as f64)
            .collect(),
    )
    .unwrap();
    let b = QNetwork::from_flat(dims, a.params().iter().map(|p| -3.0 * p + 1.0).collect()).unwrap();
    store
        .save("a", &ModelCheckpoint::new(a.clone(), 8, 3, 2, "x", 10))
        .unwrap();
    store
        .save("b", &ModelCheckpoint::new(b.clone(), 8, 3, 2, "y", 10))
        .unwrap();
    let out = f.path("mean.wdqn");
    ok(&[
        "aggregate",
        "--store",
        s(store.root()),
        "--names",
        "a,b",
        "--out",
        s(&out),
    ]);
    let mean = read_checkpoint(&out).unwrap().model;
    let want = aggregation::average_models(&[&a, &b]).unwrap();
    assert_eq!(mean, want);
    assert!(mean
        .params()
        .iter()
        .zip(a.params())
        .all(|(m, p)| *m == 0.5 - p));

    let bad = specgrid(&[
        "aggregate",
        "--store",
        s(store.root()),
        "--names",
        "a,zzz",
        "--out",
        s(&f.path("x.wdqn")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn inspect_summarizes_and_reports_bad_lines() {
    let f = Fixture::new();
    let run = train(&f, "train", "run");
    let out = ok(&[
        "inspect",
        "--metrics",
        s(&run.join("metrics.csv")),
        "--window",
        "10",
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary.is_object());

    let broken = f.path("broken.csv");
    let mut text = fs::read_to_string(run.join("metrics.csv")).unwrap();
    text.push_str("5,0,not-a-number,0,0,1,0\n");
    let line = text.lines().count();
    fs::write(&broken, text).unwrap();
    let out = specgrid(&["inspect", "--metrics", s(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("line {line}")));
}

#[test]
fn bad_invocations_exit_1_without_outputs() {
    let f = Fixture::new();
    let out_dir = f.path("never");
    let missing = specgrid(&[
        "train",
        "--scenario",
        s(&f.path("missing.json")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!out_dir.exists());

    let unknown = specgrid(&[
        "train",
        "--preset",
        "six_pair",
        "--out",
        s(&out_dir),
        "--frobnicate",
    ]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(!out_dir.exists());

    let no_preset = specgrid(&["train", "--preset", "atlantis", "--out", s(&out_dir)]);
    assert_eq!(no_preset.status.code(), Some(1));

    fs::write(f.path("extra.json"), r#"{"total_steps": 10, "bogus": 1}"#).unwrap();
    let bad_config = specgrid(&[
        "train",
        "--preset",
        "six_pair",
        "--config",
        s(&f.path("extra.json")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(bad_config.status.code(), Some(1));
    assert!(!out_dir.exists());
}

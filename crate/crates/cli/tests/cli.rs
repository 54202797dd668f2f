use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_notebert");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json")
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    /// The shipped example config with every path redirected into the temp dir.
    fn example_args(&self) -> Vec<String> {
        let set = |k: &str, v: &str| ["--set".to_string(), format!("{k}={}", self.path(v).display())];
        let mut args = vec!["--config".to_string(), example_config().display().to_string()];
        for (k, v) in [
            ("paths.notes", "data/notes.jsonl"),
            ("paths.task_train", "data/train.conll"),
            ("paths.task_test", "data/test.conll"),
            ("paths.work", "work"),
            ("paths.reports", "reports"),
        ] {
            args.extend(set(k, v));
        }
        args
    }

    fn notebert(&self, args: &[String], sub: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .args(sub)
            .current_dir(self.dir.path())
            .env_remove("NOTEBERT_REPORT_DIR")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[String], sub: &[&str]) -> String {
        let out = self.notebert(args, sub);
        assert!(
            out.status.success(),
            "{sub:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, p: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(p)).unwrap()).unwrap()
    }
}

#[test]
fn example_pipeline_reaches_span_f1_report() {
    let run = Run::new();
    let args = run.example_args();
    for sub in ["synth", "ingest", "vocab", "instances", "pretrain", "finetune", "eval"] {
        run.ok(&args, &[sub]);
    }
    let report = run.json("reports/eval.json");
    for key in ["precision", "recall", "f1", "tp", "pred", "gold"] {
        assert!(report["micro"][key].is_number(), "missing micro.{key}");
    }
    assert_eq!(report["sentences"], 100);
    assert!(report["per_class"].is_object());
    assert!(run.path("reports/eval.csv").exists());
    assert!(run.path("reports/finetune_grid.csv").exists());

    let manifest = run.json("reports/manifests/finetune.json");
    let config_hash = manifest["config_sha256"].as_str().unwrap().to_string();
    assert_eq!(config_hash.len(), 64);
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("pretrain.ckpt")));
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert!(!manifest["outputs"].as_array().unwrap().is_empty());

    let ck = notebert::model::Checkpoint::load(&run.path("work/finetuned.ckpt")).unwrap();
    assert_eq!(ck.metadata.get("config_sha256"), Some(&config_hash));
}

#[test]
fn rerunning_a_manifest_reproduces_outputs() {
    let run = Run::new();
    let args = run.example_args();
    for sub in ["synth", "ingest", "vocab", "instances", "pretrain"] {
        run.ok(&args, &[sub]);
    }
    let first = run.json("reports/manifests/pretrain.json");
    let replay = run.path("replay.json");
    std::fs::write(&replay, serde_json::to_string(&first["config"]).unwrap()).unwrap();
    run.ok(&["--config".into(), replay.display().to_string()], &["pretrain"]);
    let second = run.json("reports/manifests/pretrain.json");
    assert_eq!(first["outputs"], second["outputs"]);
    assert_eq!(first["config_sha256"], second["config_sha256"]);
}

#[test]
fn stats_on_five_note_fixture() {
    let run = Run::new();
    let args = vec![
        "--set".to_string(),
        format!("paths.notes={}", fixture("five_notes.jsonl").display()),
    ];
    run.ok(&args, &["ingest"]);
    let out = run.ok(&args, &["stats"]);
    assert!(out.contains("Discharge Summary: 3"), "{out}");
    assert!(out.contains("Nursing: 2"), "{out}");
    let stats = run.json("reports/stats.json");
    assert_eq!(stats["notes"], 5);
    assert_eq!(stats["type_counts"]["Discharge Summary"], 3);
    assert_eq!(stats["type_counts"]["Nursing"], 2);
    let csv = std::fs::read_to_string(run.path("reports/stats.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn unknown_subcommand_prints_usage() {
    let run = Run::new();
    let out = run.notebert(&[], &["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_artifact_names_its_producer() {
    let run = Run::new();
    let out = run.notebert(&[], &["pretrain"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `vocab` first"), "{err}");
}

#[test]
fn schema_violations_exit_with_config_code() {
    let run = Run::new();
    for bad in ["pretrain.stepz=5", "finetune.grid.lrs=[]", "schema_version=9"] {
        let out = run.notebert(&["--set".into(), bad.into()], &["stats"]);
        assert_eq!(out.status.code(), Some(2), "{bad}: {}", String::from_utf8_lossy(&out.stderr));
    }
    std::fs::write(run.path("broken.json"), "{\"seed\": ").unwrap();
    let out = run.notebert(&["--config".into(), run.path("broken.json").display().to_string()], &["stats"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_has_no_side_effects() {
    let run = Run::new();
    let args = run.example_args();
    for sub in ["synth", "pretrain", "finetune", "deid", "experiment"] {
        let mut cmd: Vec<&str> = vec!["--dry-run", sub];
        if sub == "experiment" {
            cmd.push("smoke");
        }
        let out = run.ok(&args, &cmd);
        assert!(out.contains("config valid"), "{out}");
    }
    let out = run.ok(&args, &["--dry-run", "pretrain"]);
    assert!(out.contains("produced by `instances`"), "{out}");
    assert_eq!(std::fs::read_dir(run.dir.path()).unwrap().count(), 0);
    let out = run.notebert(&[args.clone(), vec!["--set".into(), "probe.k=0".into()]].concat(), &["--dry-run", "probe"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_dir_can_be_redirected() {
    let run = Run::new();
    let elsewhere = run.path("elsewhere");
    let out = Command::new(BIN)
        .args(["--set", &format!("paths.notes={}", fixture("five_notes.jsonl").display()), "ingest"])
        .current_dir(run.dir.path())
        .env("NOTEBERT_REPORT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("manifests/ingest.json").exists());
    assert!(!run.path("reports").exists());
}

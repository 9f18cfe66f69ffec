use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use segcl::metrics::{format_table, reports_from_csv};

fn toy_config() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(cfg: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("config.json"),
            serde_json::to_string_pretty(cfg).unwrap(),
        )
        .unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("config.json");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_segcl"));
        cmd.arg(args[0]).arg("--config").arg(&config).args(&args[1..]);
        cmd.env("SEGCL_OUTPUT_DIR", self.out()).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }
}

fn error_of(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().expect("diagnostic on stderr");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn generate_writes_manifest_matching_config() {
    let ws = Workspace::new(&toy_config());
    ws.ok(&["generate"]);
    let manifest: Value = serde_json::from_slice(&read(ws.out().join("data/split.json"))).unwrap();
    // 2 train volumes x 2 slices, 1 val volume x 2 slices, 2 test volumes x 2 slices.
    assert_eq!(manifest["labeled_train"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["labeled_val"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["test_source"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["test_target"].as_array().unwrap().len(), 4);
    let vols = fs::read_dir(ws.out().join("data"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "vol"))
        .count();
    assert_eq!(vols, 16);

    let first = read(ws.out().join("data/split.json"));
    ws.ok(&["generate"]);
    assert_eq!(first, read(ws.out().join("data/split.json")));
}

#[test]
fn missing_field_is_named_and_exits_nonzero() {
    let mut cfg = toy_config();
    cfg["train"].as_object_mut().unwrap().remove("epochs");
    let ws = Workspace::new(&cfg);
    let err = error_of(&ws.run(&["generate"]));
    assert_eq!(err["category"], "config");
    assert!(err["message"].as_str().unwrap().contains("epochs"), "{err}");
}

#[test]
fn unknown_field_is_rejected() {
    let mut cfg = toy_config();
    cfg["model"]["widht"] = 3.into();
    let ws = Workspace::new(&cfg);
    let err = error_of(&ws.run(&["generate"]));
    assert_eq!(err["category"], "config");
    assert!(err["message"].as_str().unwrap().contains("widht"), "{err}");
}

#[test]
fn usage_errors_are_json() {
    let o = Command::new(env!("CARGO_BIN_EXE_segcl")).arg("bogus").output().unwrap();
    assert_eq!(error_of(&o)["category"], "usage");
}

#[test]
fn train_without_dataset_fails_cleanly() {
    let ws = Workspace::new(&toy_config());
    let err = error_of(&ws.run(&["train"]));
    assert_eq!(err["category"], "io");
    assert!(err["message"].as_str().unwrap().contains("generate"), "{err}");
}

#[test]
fn baseline_training_writes_checkpoint_and_log() {
    let ws = Workspace::new(&toy_config());
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let ckpts: Vec<_> = fs::read_dir(ws.out().join("train"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("best"))
        .collect();
    assert_eq!(ckpts, ["best.ckpt"]);
    let log = String::from_utf8(read(ws.out().join("train/metrics.jsonl"))).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.iter().any(|l| l["split"] == "train" && l["metric"] == "loss"));
    assert!(lines.iter().any(|l| l["split"] == "val" && l["class"] == "all"));
}

#[test]
fn ntxent_with_single_pair_is_rejected_before_training() {
    let mut cfg = toy_config();
    cfg["train"]["regime"] = "joint".into();
    cfg["train"]["batch_pairs_per_domain"] = 1.into();
    let ws = Workspace::new(&cfg);
    let err = error_of(&ws.run(&["generate"]));
    assert_eq!(err["category"], "config");
    assert!(
        err["message"].as_str().unwrap().contains("batch_pairs_per_domain"),
        "{err}"
    );
    assert!(!ws.out().join("train").exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = toy_config();
    cfg["train"]["regime"] = "joint".into();
    cfg["train"]["epochs"] = 3.into();
    let full = Workspace::new(&cfg);
    full.ok(&["generate"]);
    full.ok(&["train"]);

    let cut = Workspace::new(&cfg);
    cut.ok(&["generate"]);
    let msg = cut.ok(&["train", "--stop-after", "1"]);
    assert!(msg.contains("resume"), "{msg}");
    assert!(!cut.out().join("train/best.ckpt").exists());
    cut.ok(&["train", "--resume"]);

    for f in ["train/metrics.jsonl", "train/best.ckpt"] {
        assert!(read(full.out().join(f)) == read(cut.out().join(f)), "{f} differs");
    }
}

#[test]
fn eval_against_itself_has_zero_relative_columns() {
    let ws = Workspace::new(&toy_config());
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let ckpt = ws.out().join("train/best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let printed = ws.ok(&["eval", "--checkpoint", ckpt, "--baseline", ckpt, "--split", "target"]);

    let csv = String::from_utf8(read(ws.out().join("eval/target.csv"))).unwrap();
    let reports = reports_from_csv(&csv).unwrap();
    assert_eq!(reports.len(), 1);
    let rows = &reports[0].rows;
    assert_eq!(rows.len(), 4 + 1);
    assert_eq!(rows.last().unwrap().class, "all");
    for r in rows {
        assert_eq!(r.dice_rel, Some(0.0));
        assert_eq!(r.uvd_rel, Some(0.0));
    }
    assert_eq!(format_table(&reports), printed);
    assert_eq!(printed.as_bytes(), read(ws.out().join("eval/target.txt")));
}

#[test]
fn eval_with_missing_checkpoint_fails() {
    let ws = Workspace::new(&toy_config());
    ws.ok(&["generate"]);
    let o = ws.run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--split", "source"]);
    assert_eq!(error_of(&o)["category"], "io");
}

#[test]
fn reproduce_reports_every_method() {
    let ws = Workspace::new(&toy_config());
    ws.ok(&["generate"]);
    ws.ok(&["reproduce", "--ablations", "--plots"]);
    let summary = String::from_utf8(read(ws.out().join("reproduce/summary.txt"))).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    let baseline: Vec<&str> = rows[0].split_whitespace().collect();
    assert_eq!(baseline[0], "Baseline");
    for rel in [2, 4, 6, 8] {
        assert_eq!(baseline[rel], "0.00");
    }
    assert_eq!(
        fs::read_dir(ws.out().join("reproduce/checkpoints")).unwrap().count(),
        12
    );
    for ablation in ["ablate-lambda", "ablate-fraction"] {
        let csv = String::from_utf8(read(ws.out().join(ablation).join("ablation.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3, "{csv}");
        let svg = String::from_utf8(read(ws.out().join(ablation).join("ablation.svg"))).unwrap();
        assert!(svg.contains("<svg"));
    }
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), read(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let mut cfg = toy_config();
    cfg["train"]["regime"] = "joint".into();
    let runs: Vec<Workspace> = (0..2).map(|_| Workspace::new(&cfg)).collect();
    for ws in &runs {
        ws.ok(&["generate"]);
        ws.ok(&["train"]);
        let ckpt = ws.out().join("train/best.ckpt");
        ws.ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "source"]);
        ws.ok(&["ablate-lambda"]);
    }
    let (a, b) = (snapshot(&runs[0].out()), snapshot(&runs[1].out()));
    assert!(a.len() > 20);
    assert_eq!(a.len(), b.len());
    for ((pa, da), (pb, db)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs", pa.display());
    }
}

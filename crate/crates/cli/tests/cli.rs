use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mrsquant_core::{Dataset, EvaluationReport};
use tempfile::TempDir;

fn mrsquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrsquant"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mrsquant")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Basis, a 60/20 dataset split and a one-epoch checkpoint, built once.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: TempDir::new().unwrap() };
        let out = mrsquant(&["gen-basis", "--out", p(&f.path("basis"))]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = mrsquant(&[
            "gen-dataset", "--basis", p(&f.path("basis")), "--count", "80", "--seed", "3", "--split", "train=3,val=1",
            "--out", p(&f.path("data")),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = mrsquant(&[
            "train", "--train", p(&f.path("data/train.dataset")), "--val", p(&f.path("data/validation.dataset")),
            "--channel-scale", "0.03125", "--batch", "16", "--epochs", "1", "--out", p(&f.path("model.ckpt")),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f
    })
}

#[test]
fn gen_basis_writes_one_archive_per_linewidth() {
    let dir = TempDir::new().unwrap();
    let out = mrsquant(&["gen-basis", "--linewidths", "0.75,1,1.25", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for lw in ["0.75", "1.00", "1.25"] {
        assert!(dir.path().join(format!("basis-{lw}hz.basis")).exists());
    }
    assert!(dir.path().join("gen-basis.manifest.json").exists());
}

#[test]
fn gen_basis_reports_bad_definitions() {
    let dir = TempDir::new().unwrap();
    let defs = dir.path().join("defs.json");
    fs::write(&defs, r#"[{"name": "X", "lines": [{"ppm": 11.0, "amplitude": 1.0, "on_sign": 1, "off_sign": 1}]}]"#).unwrap();
    let out = mrsquant(&["gen-basis", "--defs", p(&defs), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ppm"), "{}", stderr(&out));

    fs::write(&defs, "[\n  {\"name\": \"X\",\n  \"lines\": oops}]").unwrap();
    let out = mrsquant(&["gen-basis", "--defs", p(&defs), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn gen_dataset_splits_and_reproduces() {
    let f = fixture();
    let train = Dataset::load(&f.path("data/train.dataset")).unwrap();
    let val = Dataset::load(&f.path("data/validation.dataset")).unwrap();
    assert_eq!((train.len(), val.len()), (60, 20));
    assert!(!f.path("data/test.dataset").exists());

    let again = TempDir::new().unwrap();
    let out = mrsquant(&[
        "gen-dataset", "--basis", p(&f.path("basis")), "--count", "80", "--seed", "3", "--split", "train=3,val=1",
        "--out", p(again.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["train.dataset", "validation.dataset"] {
        assert_eq!(fs::read(f.path("data").join(name)).unwrap(), fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn gen_dataset_noiseless_and_missing_basis() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = mrsquant(&[
        "gen-dataset", "--basis", p(&f.path("basis")), "--count", "12", "--noisy-fraction", "0", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = Dataset::load(&dir.path().join("train.dataset")).unwrap();
    assert!(ds.samples.iter().all(|s| s.noise_sigma == 0.0));

    let empty = TempDir::new().unwrap();
    let out = mrsquant(&["gen-dataset", "--basis", p(empty.path()), "--count", "4", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let f = fixture();
    assert!(f.path("model.ckpt").exists());
    let history = fs::read_to_string(f.path("model.ckpt.history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("model.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn train_usage_and_divergence_codes() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (train, val, out_path) = (f.path("data/train.dataset"), f.path("data/validation.dataset"), dir.path().join("m.ckpt"));
    let run = |extra: &[&str]| {
        let mut args = vec![
            "train", "--train", p(&train), "--val", p(&val), "--channel-scale", "0.03125", "--batch", "16", "--epochs", "2",
            "--out", p(&out_path),
        ];
        args.extend_from_slice(extra);
        mrsquant(&args)
    };
    assert_eq!(code(&run(&["--components", "m,x"])), 1);
    assert_eq!(code(&run(&["--size", "huge"])), 1);
    let out = run(&["--learning-rate", "1e300"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn quantify_tsv_rows_sum_to_one() {
    let f = fixture();
    let out = mrsquant(&["quantify", "--model", p(&f.path("model.ckpt")), "--spectra", p(&f.path("data/validation.dataset"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(header[0], "spectrum");
    assert_eq!(header.len(), 6);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    for row in rows {
        let sum: f64 = row.split('\t').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "{row}");
    }
}

#[test]
fn quantify_continues_past_missing_files() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.scan");
    let report = dir.path().join("pred.json");
    let out = mrsquant(&[
        "quantify", "--model", p(&f.path("model.ckpt")), "--spectra", p(&missing), p(&f.path("data/validation.dataset")),
        "--format", "report", "--out", p(&report),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.scan"), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["spectra"].as_array().unwrap().len(), 20);
    assert!(dir.path().join("pred.json.manifest.json").exists());
}

#[test]
fn evaluate_network_and_baseline() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = mrsquant(&[
        "evaluate", "--model", p(&f.path("model.ckpt")), "--baseline", "nnls", "--basis", p(&f.path("basis")),
        "--dataset", p(&f.path("data/validation.dataset")), "--reduce", "naa,gaba,glx", "--merge-glx", "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let net = EvaluationReport::load(&dir.path().join("report-network.json")).unwrap();
    let nnls = EvaluationReport::load(&dir.path().join("report-nnls.json")).unwrap();
    assert_eq!(net.records + net.excluded_records, nnls.records + nnls.excluded_records);
    assert_eq!(nnls.metabolites, vec!["NAA", "GABA", "GLX"]);
    assert!(nnls.epsilon < 0.02, "in-basis data, half of it noisy: {}", nnls.epsilon);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn evaluate_rejects_empty_dataset_and_missing_model() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut ds = Dataset::load(&f.path("data/validation.dataset")).unwrap();
    ds.samples.clear();
    let empty = dir.path().join("empty.dataset");
    ds.save(&empty).unwrap();
    let out = mrsquant(&["evaluate", "--model", p(&f.path("model.ckpt")), "--dataset", p(&empty), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let out = mrsquant(&["evaluate", "--dataset", p(&empty), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn thread_variable_and_flags_are_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_mrsquant"))
        .args(["gen-basis", "--out", "/nonexistent/never"])
        .env("MRSQUANT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&mrsquant(&["gen-basis", "--bogus"])), 1);
    assert_eq!(code(&mrsquant(&["--help"])), 0);
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn ganda(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ganda"))
        .args(args)
        .current_dir(cwd)
        .env("GANDA_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// SHA-256 of every file under `dir`, keyed by relative path.
fn hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            map.insert(name, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
        }
    }
    map
}

const CONFIG: &str = r#"
seed = 5

[phantom]
width_px = 96
height_px = 80
vessel_segment_count = 3
nuclei_count = 25
pixel_size_um = 2.0

[dataset]
slides = 3
test_slides = 1

[train]
epochs = 2
pixel_loss_mode = "MSE"

[generator]
contracting_filters = [4, 8]
residual_filters = 8
expansive_filters = [8, 4]

[discriminator]
conv_filters = [4, 8]

[analysis]
roi_size_px = 16
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", "run.toml"];
        all.extend_from_slice(args);
        ganda(&all, self.dir.path())
    }

    fn phantom(&self) {
        ok(&self.run(&["phantom", "--out", "data"]));
    }

    fn preprocess(&self, patch: &str) {
        ok(&self.run(&["preprocess", "--input", "data/dataset.json", "--patch-size", patch, "--out", "store"]));
    }
}

#[test]
fn phantom_writes_dataset_and_is_deterministic() {
    let ws = Workspace::new();
    ws.phantom();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("data/dataset.json")).unwrap()).unwrap();
    let slides = manifest["slides"].as_array().unwrap();
    assert_eq!(slides.len(), 3);
    assert_eq!(slides.iter().filter(|s| s["split"] == "test").count(), 1);
    assert_eq!(manifest["master_seed"], 5);
    let first = hashes(&ws.path("data"));

    ok(&ws.run(&["phantom", "--out", "again"]));
    assert_eq!(first, hashes(&ws.path("again")));

    ok(&ws.run(&["phantom", "--out", "other", "--seed", "6"]));
    assert_ne!(first, hashes(&ws.path("other")));
}

#[test]
fn config_and_path_errors_exit_with_one() {
    let ws = Workspace::new();
    let out = ganda(&["phantom", "--config", "missing.toml", "--out", "x"], ws.dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config file not found") && err.contains("--help"), "{err}");

    fs::write(ws.path("bad.toml"), "[phantom]\nwidht_px = 3\n").unwrap();
    let out = ganda(&["phantom", "--config", "bad.toml", "--out", "x"], ws.dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = ws.run(&["phantom"]);
    assert_eq!(out.status.code(), Some(1), "missing --out");
    let out = ws.run(&["preprocess", "--input", "nowhere", "--out", "s"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ganda(&["frobnicate"], ws.dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = ws.run(&["train", "--input", "data", "--out", "t", "--source", "dapi"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preprocess_manifest_matches_tiling_arithmetic() {
    use ganda_core::slide_io::load_slide_manifest;
    use ganda_core::tiling::{decompose_filtered, read_manifest_csv};

    let ws = Workspace::new();
    ws.phantom();
    ws.preprocess("32");
    let store: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("store/store.json")).unwrap()).unwrap();
    assert_eq!(store["patch_size_px"], 32);
    let entries = store["slides"].as_array().unwrap();
    assert_eq!(entries.len(), 2, "train split only");
    for e in entries {
        let id = e["slide_id"].as_str().unwrap();
        let rows = read_manifest_csv(&ws.path(&format!("store/{}", e["manifest"].as_str().unwrap()))).unwrap();
        // 96x80 pads to 96x96: nine 32-px tiles.
        assert_eq!(rows.len(), 96 * 96 / (32 * 32));
        let slide = load_slide_manifest(&ws.path(&format!("data/{id}.json"))).unwrap();
        let (oracle, _) = decompose_filtered(&slide, 32).unwrap();
        let got: Vec<bool> = rows.iter().map(|r| r.included).collect();
        let want: Vec<bool> = oracle.records.iter().map(|r| r.included).collect();
        assert_eq!(got, want);
    }

    // Default patch size: one 512-px tile per slide.
    ok(&ws.run(&["preprocess", "--input", "data/dataset.json", "--out", "store512"]));
    let store: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("store512/store.json")).unwrap()).unwrap();
    assert_eq!(store["patch_size_px"], 512);
    let m = store["slides"][0]["manifest"].as_str().unwrap();
    assert_eq!(read_manifest_csv(&ws.path(&format!("store512/{m}"))).unwrap().len(), 1);
}

#[test]
fn train_predict_analyze_pipeline() {
    use ganda_core::networks::load_checkpoint;
    use ganda_core::slide_io::load_slide_manifest;
    use ganda_core::SourceMode;

    let ws = Workspace::new();
    ws.phantom();
    ws.preprocess("16");

    ok(&ws.run(&["train", "--input", "store", "--source", "vessel", "--out", "model", "--deterministic"]));
    for f in ["epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt", "loss_log.csv"] {
        assert!(ws.path(&format!("model/{f}")).is_file(), "{f}");
    }
    let log = fs::read_to_string(ws.path("model/loss_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,epoch,d_loss,g_adv,g_pix,g_total"));
    let ckpt = load_checkpoint(&ws.path("model/final.ckpt")).unwrap();
    assert_eq!(ckpt.meta.source_mode, Some(SourceMode::Vessel));
    assert_eq!(ckpt.generator_spec.input_channels, 1);
    assert_eq!(ckpt.discriminator_spec.input_size_px, 16);

    let test_slide = "data/phantom02.json";
    let predict = |out: &str| {
        ok(&ws.run(&[
            "predict",
            "--input",
            test_slide,
            "--checkpoint",
            "model/final.ckpt",
            "--out",
            out,
        ]))
    };
    predict("pred");
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("pred/phantom02_prediction.json")).unwrap()).unwrap();
    assert_eq!(sidecar["source_mode"], "VESSEL");
    assert_eq!(sidecar["slide_id"], "phantom02");
    assert_eq!(sidecar["checkpoint_hash"].as_str().unwrap().len(), 64);
    let merged = load_slide_manifest(&ws.path("pred/phantom02_merged.json")).unwrap();
    let real = load_slide_manifest(&ws.path(test_slide)).unwrap();
    assert_eq!(merged.dims(), real.dims());
    predict("pred2");
    assert_eq!(hashes(&ws.path("pred")), hashes(&ws.path("pred2")));

    ok(&ws.run(&[
        "analyze",
        "--input",
        test_slide,
        "--merged",
        "pred/phantom02_merged.json",
        "--out",
        "report",
        "--plots",
    ]));
    for f in ["report.json", "report.schema.json", "residual.png", "scatter.svg", "distance_hist.svg"] {
        assert!(ws.path(&format!("report/{f}")).is_file(), "{f}");
    }

    // A checkpoint trained on VESSEL cannot serve BOTH.
    let out = ws.run(&[
        "predict",
        "--input",
        test_slide,
        "--checkpoint",
        "model/final.ckpt",
        "--source",
        "both",
        "--out",
        "bad",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let ws = Workspace::new();
    ws.phantom();
    ws.preprocess("16");
    ok(&ws.run(&["train", "--input", "store", "--out", "full"]));

    let one_epoch = fs::read_to_string(ws.path("run.toml")).unwrap().replace("epochs = 2", "epochs = 1");
    fs::write(ws.path("one.toml"), one_epoch).unwrap();
    ok(&ganda(&["train", "--config", "one.toml", "--input", "store", "--out", "part"], ws.dir.path()));
    assert!(!ws.path("part/epoch_002.ckpt").exists());
    ok(&ws.run(&["train", "--resume", "--input", "store", "--out", "part"]));

    let full = fs::read(ws.path("full/final.ckpt")).unwrap();
    assert_eq!(full, fs::read(ws.path("part/final.ckpt")).unwrap());
    assert_eq!(
        fs::read(ws.path("full/loss_log.csv")).unwrap(),
        fs::read(ws.path("part/loss_log.csv")).unwrap()
    );

    // Resuming under a different training setup is refused.
    let other = fs::read_to_string(ws.path("run.toml")).unwrap().replace("epochs = 2", "epochs = 3\nbeta = 1.0");
    fs::write(ws.path("other.toml"), other).unwrap();
    let out = ganda(&["train", "--config", "other.toml", "--resume", "--input", "store", "--out", "part"], ws.dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn self_comparison_report_is_perfect_and_matches_schema() {
    let ws = Workspace::new();
    ws.phantom();
    let slide = "data/phantom02.json";
    ok(&ws.run(&["analyze", "--input", slide, "--merged", slide, "--out", "self"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("self/report.json")).unwrap()).unwrap();
    assert_eq!(report["regression"]["r2"], 1.0);
    assert_eq!(report["regression"]["slope"], 1.0);
    assert_eq!(report["mse"], 0.0);
    assert_eq!(report["distance_real"], report["distance_pred"]);
    assert_eq!(report["config"]["pixel_size_um"], 2.0);
    assert!(!ws.path("self/scatter.svg").exists(), "plots only with --plots");

    let schema: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("self/report.schema.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let mut broken = report.clone();
    broken["regression"]["r2"] = serde_json::json!("high");
    assert!(!validator.is_valid(&broken));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ged(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ged"))
        .args(args)
        .env("GED_NUM_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, size: usize) -> PathBuf {
    let o = ged(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        "0",
        "--out",
        s(dir),
        "--height",
        &size.to_string(),
        "--width",
        &size.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.json")
}

const TINY: &str = r#"{
    "denoiser.base_channels": 8,
    "denoiser.norm_groups": 4,
    "denoiser.attention_heads": 2,
    "denoiser.text_len": 4,
    "denoiser.text_dim": 16,
    "training.accumulation": 1,
    "training.lr_start": 1e-3,
    "training.lr_end": 1e-4
}"#;

fn train_tiny(root: &Path, manifest: &Path, steps: usize) -> PathBuf {
    let cfg = root.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let ckpt = root.join("model.safetensors");
    let o = ged(&[
        "train",
        "--manifest",
        s(manifest),
        "--config",
        s(&cfg),
        "--steps",
        &steps.to_string(),
        "--crop",
        "32",
        "--out",
        s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    ckpt
}

fn pngs(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    v.sort();
    v
}

fn echoed_config(out: &str) -> serde_json::Value {
    let line = out.lines().find_map(|l| l.strip_prefix("effective config: ")).expect("config echo");
    serde_json::from_str(line).unwrap()
}

#[test]
fn synth_writes_manifest_deterministically() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ma = synth(a.path(), 64, 32);
    let mb = synth(b.path(), 64, 32);
    let text = std::fs::read_to_string(&ma).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 64);
    assert_eq!(text, std::fs::read_to_string(&mb).unwrap());
    let img = |d: &Path| std::fs::read(d.join("images/synth_0000.png")).unwrap();
    assert_eq!(img(a.path()), img(b.path()));
}

#[test]
fn synth_rejects_zero_images() {
    let d = TempDir::new().unwrap();
    let o = ged(&["synth", "--n", "0", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.path().join("manifest.json").exists());
}

#[test]
fn help_exits_zero() {
    assert_eq!(ged(&["--help"]).status.code(), Some(0));
    assert_eq!(ged(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn train_dry_run_echoes_defaults() {
    let d = TempDir::new().unwrap();
    let m = synth(d.path(), 2, 32);
    let o = ged(&["train", "--manifest", s(&m), "--out", s(&d.path().join("m.safetensors")), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = echoed_config(&stdout(&o));
    assert_eq!(cfg["training.lr_start"].as_f64(), Some(5e-5));
    assert_eq!(cfg["training.lr_end"].as_f64(), Some(5e-6));
    assert_eq!(cfg["training.total_steps"].as_u64(), Some(5000));
    assert!(!d.path().join("m.safetensors").exists());
}

#[test]
fn train_flags_override_config_file() {
    let d = TempDir::new().unwrap();
    let m = synth(d.path(), 2, 32);
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"training.total_steps": 7, "dataset.crop_size": [64, 64]}"#).unwrap();
    let o = ged(&[
        "train", "--manifest", s(&m), "--config", s(&cfg), "--steps", "3", "--out", "x", "--dry-run",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = echoed_config(&stdout(&o));
    assert_eq!(echoed["training.total_steps"].as_u64(), Some(3));
    assert_eq!(echoed["dataset.crop_size"], serde_json::json!([64, 64]));

    std::fs::write(&cfg, r#"{"training.bogus": 1}"#).unwrap();
    let o = ged(&["train", "--manifest", s(&m), "--config", s(&cfg), "--out", "x", "--dry-run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("training.bogus"));
}

#[test]
fn train_missing_manifest_exits_one() {
    let d = TempDir::new().unwrap();
    let o = ged(&[
        "train",
        "--manifest",
        s(&d.path().join("nope.json")),
        "--out",
        s(&d.path().join("m.safetensors")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn train_infer_eval_end_to_end() {
    let d = TempDir::new().unwrap();
    let m = synth(&d.path().join("data"), 3, 32);
    let ckpt = train_tiny(d.path(), &m, 10);
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(ckpt.with_extension("log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 10);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }

    // Sweep: 11 granularities per image.
    let sweep = d.path().join("sweep");
    let o = ged(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&m), "--sweep", "11", "--out", s(&sweep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = pngs(&sweep);
    assert_eq!(files.len(), 33);
    assert!(files.contains(&"synth_0000_g000.png".to_string()));
    assert!(files.contains(&"synth_0002_g100.png".to_string()));

    // Single granularity.
    let single = d.path().join("single");
    let o = ged(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&m), "--g", "0.5", "--out", s(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = pngs(&single);
    assert_eq!(files.len(), 3);
    assert!(files.iter().all(|f| f.contains("g050")));
    let png = image::open(single.join(&files[0])).unwrap();
    assert!(matches!(png, image::DynamicImage::ImageLuma16(_)));
    let luma = png.to_luma16();
    assert_eq!(luma.dimensions(), (32, 32));
    assert!(luma.pixels().all(|p| p.0[0] <= u16::MAX));

    // Reference kernel, with and without NMS.
    let csv = d.path().join("single.csv");
    let o = ged(&["eval", "--pred-dir", s(&single), "--manifest", s(&m), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().next().unwrap().contains("apply_nms=true"));
    let single_ods = ods_of(&text);

    let raw = d.path().join("raw.csv");
    let o = ged(&["eval", "--pred-dir", s(&single), "--manifest", s(&m), "--no-nms", "--out", s(&raw)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&raw).unwrap().lines().next().unwrap().contains("apply_nms=false"));

    // Best-of-sweep is at least the single-granularity score.
    let multi = d.path().join("multi.csv");
    let o = ged(&["eval", "--pred-dir", s(&sweep), "--manifest", s(&m), "--multi", "11", "--out", s(&multi)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let multi_ods = ods_of(&std::fs::read_to_string(&multi).unwrap());
    assert!(multi_ods >= single_ods - 1e-12, "{multi_ods} < {single_ods}");

    let sweep_g = d.path().join("g05.csv");
    let o = ged(&["eval", "--pred-dir", s(&sweep), "--manifest", s(&m), "--g", "0.5", "--out", s(&sweep_g)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g_ods = ods_of(&std::fs::read_to_string(&sweep_g).unwrap());
    assert!(multi_ods >= g_ods - 1e-12);

    // Ambiguous directory without --g or --multi.
    let o = ged(&["eval", "--pred-dir", s(&sweep), "--manifest", s(&m)]);
    assert_eq!(o.status.code(), Some(1));

    // Missing predictions are listed.
    std::fs::remove_file(single.join("synth_0001_g050.png")).unwrap();
    let o = ged(&["eval", "--pred-dir", s(&single), "--manifest", s(&m), "--out", s(&csv)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("synth_0001"), "{}", stderr(&o));
}

fn ods_of(csv: &str) -> f64 {
    let mut lines = csv.lines().skip_while(|l| !l.starts_with("ods,"));
    lines.next().expect("summary header");
    lines.next().unwrap().split(',').next().unwrap().parse().unwrap()
}

#[test]
fn fast_kernel_fails_gracefully() {
    let d = TempDir::new().unwrap();
    let m = synth(d.path(), 1, 32);
    let o = ged(&["eval", "--pred-dir", s(d.path()), "--manifest", s(&m), "--kernel", "fast"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not available"), "{}", stderr(&o));
}

#[test]
fn infer_rejects_mismatched_checkpoint() {
    let d = TempDir::new().unwrap();
    let m = synth(d.path(), 1, 32);
    let bad = d.path().join("bad.safetensors");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = ged(&["infer", "--checkpoint", s(&bad), "--manifest", s(&m), "--g", "0.5", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(1));
}

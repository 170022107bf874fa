use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tmd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("SOURCE_DATE_EPOCH", "1727784000")
        .output()
        .unwrap()
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn generate_prompt_writes_artifact_and_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmd(
        &["generate", "--scenario", "prompt", "--text", "crack on the rail", "--seed", "7", "--out", "t.png"],
        dir.path(),
    );
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["backend_id"], "offline-t2i");
    let id = v["request_id"].as_str().unwrap();
    assert!(dir.path().join("tmd-data/artifacts").join(format!("{id}.png")).is_file());
    assert!(dir.path().join("t.png").is_file());
    assert_eq!(std::fs::read_to_string(dir.path().join("tmd-data/meters.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn generate_inpaint_from_files() {
    use tmd_core::raster::{Mask, RgbaImage};
    use tmd_core::texture::{encode_mask_png, encode_png};
    let dir = tempfile::tempdir().unwrap();
    let photo = encode_png(&RgbaImage::filled(300, 200, [90, 90, 95, 255]), &[]).unwrap();
    let mask = encode_mask_png(&Mask::from_fn(300, 200, |x, _| x > 150)).unwrap();
    std::fs::write(dir.path().join("photo.png"), photo).unwrap();
    std::fs::write(dir.path().join("mask.png"), mask).unwrap();
    let out = tmd(
        &[
            "generate", "--scenario", "inpaint", "--image", "photo.png", "--mask", "mask.png", "--instruction",
            "add rust",
        ],
        dir.path(),
    );
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["backend_id"], "offline-edit");
}

#[test]
fn generate_without_text_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmd(&["generate", "--scenario", "prompt"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--text"));
}

#[test]
fn dataset_build_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let images = core_fixtures().join("images");
    let images = images.to_str().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        stdout(&tmd(&["dataset", "build", "--images", images, "--k", "10", "--seed", "3", "--out", name], dir.path()));
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.lines().next().unwrap().contains("2024-10-01T12:00:00Z"));
}

#[test]
fn dataset_build_reports_exhaustion() {
    let dir = tempfile::tempdir().unwrap();
    let images = core_fixtures().join("images");
    let out = tmd(
        &["dataset", "build", "--images", images.to_str().unwrap(), "--k", "60", "--out", "x.jsonl"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("distinct rephrasings"));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn sus_score_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = core_fixtures().join("sus_scenario1.csv");
    let table = stdout(&tmd(&["sus", "score", "--input", csv.to_str().unwrap()], dir.path()));
    assert!(table.lines().nth(1).unwrap().contains("70.00"));
    let json = stdout(&tmd(
        &["sus", "score", "--input", csv.to_str().unwrap(), "--by", "scenario,platform", "--format", "json"],
        dir.path(),
    ));
    let v: Value = serde_json::from_str(&json).unwrap();
    let n: u64 = v["groups"].as_array().unwrap().iter().map(|g| g["n"].as_u64().unwrap()).sum();
    assert_eq!(n, 10);
}

#[test]
fn report_prices_a_meter_file() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["crack on the rail", "rust on fastener"] {
        stdout(&tmd(&["generate", "--scenario", "prompt", "--text", text], dir.path()));
    }
    let out = stdout(&tmd(
        &[
            "report", "--meters", "tmd-data/meters.jsonl", "--rates", "tmd-data/rates.json", "--format", "json",
        ],
        dir.path(),
    ));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["records"], 2);
    assert_eq!(v["cost"]["total"]["records"], 2);
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"backends": [], "rate_card": "r.json", "dataset_dir": "d", "artifact_dir": "a", "meter_file": "m", "target": 300}"#,
    )
    .unwrap();
    let out = tmd(&["generate", "--config", "c.json", "--scenario", "prompt", "--text", "x"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("target"));
}

#[test]
fn shipped_offline_config_is_valid() {
    let cfg = tmd_cli::config::AppConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("config/offline.json"))
        .unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.max_concurrency, 16);
}

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;

use chrono::{DateTime, Utc};
use tmd_core::forge::{
    attach_system_message, build_dataset, caption_image, dataset_to_jsonl, export_dataset, import_dataset,
    CaptionBackend, ForgeConfig, ForgeError, ForgeStats, ImageRef, OfflineCaptioner, OfflineRephraser, SourceImage,
    DEFAULT_CAPTION_TEMPLATE, DEFAULT_SYSTEM_TEMPLATE,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn images() -> Vec<SourceImage> {
    let mut paths: Vec<_> = std::fs::read_dir(fixtures().join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| SourceImage {
            path: p.file_name().unwrap().to_string_lossy().into_owned(),
            bytes: std::fs::read(&p).unwrap(),
        })
        .collect()
}

fn created() -> DateTime<Utc> {
    "2024-10-01T12:00:00Z".parse().unwrap()
}

#[test]
fn every_fixture_image_has_a_canned_caption() {
    let captioner = OfflineCaptioner::builtin();
    let template = tmd_core::forge::caption_template(DEFAULT_CAPTION_TEMPLATE).unwrap();
    for img in images() {
        let text = captioner.caption(template, &img.bytes).unwrap();
        assert!(!text.contains("uncatalogued"), "{} fell through to the fallback", img.path);
    }
}

#[test]
fn five_captions_times_ten() {
    let stats = ForgeStats::default();
    let ds = build_dataset(
        &images(),
        &ForgeConfig::new(10, 0),
        &OfflineCaptioner::builtin(),
        &OfflineRephraser,
        created(),
        Some(&stats),
    )
    .unwrap();
    assert_eq!(ds.entries.len(), 50);
    assert_eq!(stats.caption_calls.load(Ordering::Relaxed), 5);
    assert_eq!(stats.rephrase_calls.load(Ordering::Relaxed), 50);

    for (i, a) in ds.entries.iter().enumerate() {
        for b in &ds.entries[i + 1..] {
            assert!(a.image_ref != b.image_ref || a.response_text != b.response_text);
            assert_ne!(a.id, b.id);
        }
    }
    let refs: HashSet<&ImageRef> = ds.entries.iter().map(|e| &e.image_ref).collect();
    assert_eq!(refs.len(), 5);
    for r in refs {
        assert_eq!(ds.entries.iter().filter(|e| &e.image_ref == r).count(), 10);
    }
    let keys: Vec<(String, &str)> = ds
        .entries
        .iter()
        .map(|e| (e.image_ref.to_string(), e.response_text.as_str()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn forge_is_byte_deterministic() {
    let run = || {
        let ds = build_dataset(
            &images(),
            &ForgeConfig::new(10, 3),
            &OfflineCaptioner::builtin(),
            &OfflineRephraser,
            created(),
            None,
        )
        .unwrap();
        dataset_to_jsonl(&ds)
    };
    assert_eq!(run(), run());
}

#[test]
fn golden_sample() {
    let img = images().into_iter().find(|i| i.path == "crack_rail_head.png").unwrap();
    let caption = caption_image(&img.bytes, &img.path, DEFAULT_CAPTION_TEMPLATE, &OfflineCaptioner::builtin()).unwrap();
    let golden: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden_sample.json")).unwrap()).unwrap();
    let response = golden["assistant"].as_str().unwrap();
    assert_eq!(response, OfflineRephraser::phrase(&caption.text, 1));

    let sample = attach_system_message(&caption, response, DEFAULT_SYSTEM_TEMPLATE).unwrap();
    assert_eq!(sample.id, golden["id"]);
    assert_eq!(sample.system_message, golden["system"]);
    assert_eq!(sample.user_instruction, golden["user"]["text"]);
    assert_eq!(sample.image_ref.to_string(), golden["user"]["image_ref"]);
    assert!(sample.image_ref.matches(&img.bytes));
}

#[test]
fn export_import_round_trip() {
    let ds = build_dataset(
        &images(),
        &ForgeConfig::new(10, 0),
        &OfflineCaptioner::builtin(),
        &OfflineRephraser,
        created(),
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.jsonl");
    export_dataset(&ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(!text.contains('\r'));
    assert_eq!(import_dataset(&path).unwrap(), ds);
}

fn violation_line(name: &str) -> (usize, String) {
    match import_dataset(&fixtures().join("datasets").join(name)) {
        Err(ForgeError::SchemaViolation { line, message }) => (line, message),
        other => panic!("{name}: expected a schema violation, got {other:?}"),
    }
}

#[test]
fn corrupt_fixtures_name_the_line() {
    let (line, msg) = violation_line("missing_system.jsonl");
    assert_eq!(line, 2);
    assert!(msg.contains("system"), "{msg}");

    let (line, msg) = violation_line("duplicate_pair.jsonl");
    assert_eq!(line, 3);
    assert!(msg.contains("line 2"), "{msg}");

    assert_eq!(violation_line("bad_schema.jsonl").0, 0);
    assert_eq!(violation_line("count_mismatch.jsonl").0, 1);
}

#[test]
fn unreadable_file_is_io_error() {
    let err = import_dataset(Path::new("/nonexistent/ds.jsonl")).unwrap_err();
    assert!(matches!(err, ForgeError::Io { .. }));
}

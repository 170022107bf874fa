//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without the test harness.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmd_cli::bench::BenchReport;
use tmd_core::backend::BackendError;
use tmd_core::forge::{
    build_dataset, caption_image, export_dataset, import_dataset, rephrase_caption, ForgeConfig, ForgeError,
    OfflineCaptioner, OfflineRephraser, RephraseBackend, SourceImage, TextureCaption, DEFAULT_CAPTION_TEMPLATE,
};
use tmd_core::gateway::{route, BackendKind};
use tmd_core::metering::{estimate_cost, read_meter_file, MeterRecord, MeterStore, RateCard};
use tmd_core::model::{Scenario, ScenarioKind, ScenarioRequest};
use tmd_core::pipeline::{pixel_digest, Engine, EngineSettings, SeedPolicy};
use tmd_core::raster::{Mask, RgbaImage};
use tmd_core::sus::{aggregate_sus, load_sus_csv, score_sus, Expertise, GroupBy, Platform, SusResponse};
use tmd_core::texture::{center_crop_rect, composite_inpaint, encode_png, standardize_pixels, StandardizationTarget, TextureSize};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn created() -> DateTime<Utc> {
    "2024-10-01T12:00:00Z".parse().unwrap()
}

fn fixture_images() -> Vec<SourceImage> {
    let mut paths: Vec<_> = std::fs::read_dir(core_fixtures().join("images"))
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

fn offline_engine(dir: &Path, size: TextureSize) -> Engine {
    Engine::offline(
        RateCard::default()
            .with("offline-t2i", "0.00002", "0.001")
            .with("offline-edit", "0.00002", "0.001"),
        Arc::new(MeterStore::in_memory()),
        EngineSettings {
            target: StandardizationTarget::new(size),
            artifact_dir: dir.to_owned(),
            seed_policy: SeedPolicy::FromRequestId,
        },
    )
    .unwrap()
}

/// Decimal string for `pico` millionths of a millionth.
fn pico_str(pico: i128) -> String {
    format!("{}.{:012}", pico / 1_000_000_000_000, pico % 1_000_000_000_000)
}

fn random_records(rng: &mut ChaCha8Rng, backends: &[&str]) -> Vec<MeterRecord> {
    (0..rng.random_range(0..40))
        .map(|i| {
            let mut r = MeterRecord::new(format!("r{i}"), ScenarioKind::Prompt, backends[rng.random_range(0..backends.len())]);
            r.prompt_tokens = rng.random_range(0..5_000);
            r.completion_tokens = rng.random_range(0..5_000);
            r.wall_time_ms = rng.random_range(0..600_000);
            r
        })
        .collect()
}

fn criterion_1() -> Check {
    let mut rec = MeterRecord::new("x", ScenarioKind::Prompt, "b");
    rec.prompt_tokens = 60;
    rec.completion_tokens = 40;
    rec.wall_time_ms = 20_000;
    let card = RateCard::default().with("b", "0.00002", "0.001");
    let c = estimate_cost(&[rec], &card).map_err(|e| e.to_string())?;
    // 100 × 0.00002 + 20 × 0.001 = 0.022, i.e. 22 × 10^12 femto
    ensure!(c.total.femto() == 22_000_000_000_000, "derived example gave {} femto", c.total.femto());
    ensure!(c.total.to_string() == "0.022", "derived example displays as {}", c.total);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let backends = ["a", "b", "c"];
    for case in 0..1000 {
        let picos: Vec<(i128, i128)> = (0..3)
            .map(|_| (rng.random_range(0..100_000_000), rng.random_range(0..10_000_000_000)))
            .collect();
        let mut card = RateCard::default();
        for (id, (t, s)) in backends.iter().zip(&picos) {
            card = card.with(*id, &pico_str(*t), &pico_str(*s));
        }
        let a = random_records(&mut rng, &backends);
        let b = random_records(&mut rng, &backends);
        let oracle = |rs: &[MeterRecord]| -> i128 {
            rs.iter()
                .map(|r| {
                    let (t, s) = picos[backends.iter().position(|b| *b == r.backend_id).unwrap()];
                    (r.prompt_tokens + r.completion_tokens) as i128 * t * 1000 + r.wall_time_ms as i128 * s
                })
                .sum()
        };
        let ca = estimate_cost(&a, &card).unwrap();
        let cb = estimate_cost(&b, &card).unwrap();
        let joined: Vec<_> = a.iter().chain(&b).cloned().collect();
        let cab = estimate_cost(&joined, &card).unwrap();
        ensure!(ca.total.femto() == oracle(&a), "case {case}: oracle mismatch");
        ensure!(cab == ca + cb, "case {case}: not additive");
        if let Some(first) = a.first() {
            let mut bigger = a.clone();
            bigger[0].prompt_tokens = first.prompt_tokens + 1;
            bigger[0].wall_time_ms = first.wall_time_ms + 1;
            ensure!(estimate_cost(&bigger, &card).unwrap().total >= ca.total, "case {case}: not monotone");
        }
    }
    Ok("0.022 exact; 1000 random sets additive, monotone and equal to the oracle".into())
}

struct Constant(AtomicUsize);

impl RephraseBackend for Constant {
    fn rephrase(&self, _: &TextureCaption, _: usize, _: u64) -> Result<String, BackendError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok("A crack on the rail.".into())
    }
}

fn criterion_2() -> Check {
    let images = fixture_images();
    ensure!(images.len() == 5, "expected 5 fixture images, found {}", images.len());
    let config = ForgeConfig::new(10, 0);
    let ds = build_dataset(&images, &config, &OfflineCaptioner::builtin(), &OfflineRephraser, created(), None)
        .map_err(|e| e.to_string())?;
    ensure!(ds.entries.len() == 50, "{} entries", ds.entries.len());
    for (i, a) in ds.entries.iter().enumerate() {
        for b in &ds.entries[i + 1..] {
            ensure!(
                a.image_ref != b.image_ref || a.response_text != b.response_text,
                "duplicate pair for {}",
                a.image_ref
            );
        }
    }
    let mut per: BTreeMap<String, usize> = BTreeMap::new();
    for e in &ds.entries {
        *per.entry(e.image_ref.to_string()).or_default() += 1;
    }
    ensure!(per.len() == 5 && per.values().all(|&n| n == 10), "per-caption counts {per:?}");

    let captioner = OfflineCaptioner::builtin();
    let caption = caption_image(&images[0].bytes, &images[0].path, DEFAULT_CAPTION_TEMPLATE, &captioner)
        .map_err(|e| e.to_string())?;
    let backend = Constant(AtomicUsize::new(0));
    let calls = backend.0.load(Ordering::SeqCst);
    match rephrase_caption(&caption, &config, &backend) {
        Err(ForgeError::ExhaustedAttempts { calls: reported, .. }) => {
            let made = backend.0.load(Ordering::SeqCst) - calls;
            let cap = config.max_attempts_factor * config.k;
            ensure!(reported == cap && made == cap, "gave up after {made} calls (reported {reported}), cap {cap}");
        }
        other => return Err(format!("constant backend did not exhaust: {other:?}")),
    }
    Ok("50 entries, 0 duplicate pairs, 10 per caption; constant backend exhausted at 100 calls".into())
}

fn criterion_3() -> Check {
    let expected = [
        (ScenarioKind::Library, BackendKind::TextToImage),
        (ScenarioKind::Prompt, BackendKind::TextToImage),
        (ScenarioKind::Inpaint, BackendKind::ImageEdit),
    ];
    ensure!(ScenarioKind::ALL.len() == expected.len(), "scenario set changed");
    for (kind, backend) in expected {
        ensure!(route(kind) == backend, "{kind:?} routed to {:?}", route(kind));
    }
    let dir = tempfile::tempdir().unwrap();
    let engine = offline_engine(dir.path(), TextureSize::S256);
    for (req, id) in [
        (library_request(), "offline-t2i"),
        (prompt_request("crack on the rail"), "offline-t2i"),
        (inpaint_request(), "offline-edit"),
    ] {
        let kind = req.kind();
        let out = engine.handle(req, Instant::now()).map_err(|e| e.to_string())?;
        ensure!(out.meter.backend_id == id, "{kind:?} was served by {}", out.meter.backend_id);
    }
    Ok("library, prompt -> text-to-image; inpaint -> image-edit (table and engine dispatch)".into())
}

fn library_request() -> ScenarioRequest {
    ScenarioRequest::new(
        "",
        Scenario::LibrarySelect {
            material_id: "rail_head".into(),
            defect_id: "squat".into(),
        },
    )
}

fn prompt_request(text: &str) -> ScenarioRequest {
    ScenarioRequest::new("", Scenario::CreativePrompt { text: text.into() })
}

fn inpaint_request() -> ScenarioRequest {
    ScenarioRequest::new(
        "",
        Scenario::ImageInpaint {
            image: Some(RgbaImage::filled(640, 480, [110, 110, 115, 255])),
            mask: Some(Mask::from_fn(640, 480, |x, y| (240..400).contains(&x) && (160..320).contains(&y))),
            instruction: "add a crack".into(),
        },
    )
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbaImage {
    let data = (0..w * h * 4).map(|_| rng.random()).collect();
    RgbaImage::from_raw(w, h, data).unwrap()
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let base = random_image(&mut rng, 64, 64);
        let patch = random_image(&mut rng, 64, 64);
        let density: f64 = rng.random();
        let bits: Vec<u8> = (0..64 * 64).map(|_| rng.random_bool(density) as u8).collect();
        let mask = Mask::from_bits(64, 64, bits.clone()).unwrap();
        let out = composite_inpaint(&base, &mask, &patch).map_err(|e| e.to_string())?;
        for y in 0..64 {
            for x in 0..64 {
                let want = if bits[(y * 64 + x) as usize] == 1 { patch.get(x, y) } else { base.get(x, y) };
                ensure!(out.get(x, y) == want, "case {case}: pixel ({x},{y}) differs from the oracle");
            }
        }
    }
    let base = random_image(&mut rng, 64, 64);
    let patch = random_image(&mut rng, 64, 64);
    let zero = composite_inpaint(&base, &Mask::zeros(64, 64), &patch).unwrap();
    let one = composite_inpaint(&base, &Mask::ones(64, 64), &patch).unwrap();
    ensure!(zero.as_raw() == base.as_raw(), "all-zero mask altered the base");
    ensure!(one.as_raw() == patch.as_raw(), "all-one mask is not the patch");
    Ok("100 random triples equal the per-pixel oracle; zero mask = base, one mask = patch".into())
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sizes = [TextureSize::S256, TextureSize::S512, TextureSize::S1024];
    for case in 0..50 {
        let (w, h) = (rng.random_range(1..700), rng.random_range(1..700));
        let target = StandardizationTarget::new(sizes[case % 3]);
        let raw = random_image(&mut rng, w, h);
        let once = standardize_pixels(&raw, target).map_err(|e| e.to_string())?;
        let twice = standardize_pixels(&once, target).map_err(|e| e.to_string())?;
        ensure!(once == twice, "case {case}: {w}x{h} not idempotent");
    }

    let r = center_crop_rect(640, 480);
    ensure!((r.x0, r.y0, r.x1, r.y1) == (80, 0, 560, 480), "640x480 crop was {r:?}");
    let photo = random_image(&mut rng, 640, 480);
    let target = StandardizationTarget::new(TextureSize::S512);
    let direct = standardize_pixels(&photo, target).unwrap();
    let manual = standardize_pixels(&photo.crop(80, 0, 560, 480), target).unwrap();
    ensure!(direct == manual, "640x480 standardization does not use the (80,0)-(560,480) square");

    for size in sizes {
        let dir = tempfile::tempdir().unwrap();
        let engine = offline_engine(dir.path(), size);
        for req in [library_request(), prompt_request("rust on fastener"), inpaint_request()] {
            let out = engine.handle(req, Instant::now()).map_err(|e| e.to_string())?;
            let (w, h) = out.artifact.pixels.dimensions();
            ensure!(w == h && w.is_power_of_two() && w == size.pixels(), "artifact is {w}x{h}");
            let on_disk = std::fs::read(&out.artifact_path).unwrap();
            let decoded = tmd_core::texture::decode_png(&on_disk).unwrap().image;
            ensure!(decoded.dimensions() == (w, h), "persisted artifact is {:?}", decoded.dimensions());
        }
    }
    Ok("50 rasters idempotent; 9 artifacts square power-of-two; 640x480 crop (80,0)-(560,480)".into())
}

fn criterion_6() -> Check {
    let resp = |s: [i64; 10]| SusResponse::new(s, 1, Platform::Ios, Expertise::Expert);
    let best = resp([5, 5, 5, 5, 5, 1, 1, 5, 5, 5]);
    let worst = resp([1, 1, 1, 1, 1, 5, 5, 1, 1, 1]);
    ensure!(score_sus(&best).unwrap() == 100.0, "best response scored {:?}", score_sus(&best));
    ensure!(score_sus(&worst).unwrap() == 0.0, "worst response scored {:?}", score_sus(&worst));
    ensure!(score_sus(&resp([3; 10])).unwrap() == 50.0, "all-3s is not 50");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..100_000 {
        let mut items = [0i64; 10];
        for v in &mut items {
            *v = rng.random_range(1..=5);
        }
        let s = score_sus(&resp(items)).unwrap();
        ensure!((0.0..=100.0).contains(&s), "case {case}: {s} out of range");
        let i = rng.random_range(0..10);
        if items[i] < 5 {
            let mut up = items;
            up[i] += 1;
            let s2 = score_sus(&resp(up)).unwrap();
            let want = if i == 5 || i == 6 { s - 2.5 } else { s + 2.5 };
            ensure!(s2 == want, "case {case}: raising q{} moved {s} to {s2}", i + 1);
        }
    }

    let responses = load_sus_csv(&core_fixtures().join("sus_scenario1.csv")).map_err(|e| e.to_string())?;
    let report = aggregate_sus(&responses, GroupBy::Scenario).map_err(|e| e.to_string())?;
    let g = report.group(Some(1), None).ok_or("no scenario 1 group")?;
    for (q, want) in [(1, 4.9), (2, 4.8), (5, 4.9), (9, 4.9)] {
        let got = g.question_means[q - 1];
        ensure!(got == want, "Q{q} mean {got}, expected {want}");
    }
    Ok(format!("extremes 100/0, all-3s 50, 1e5 random responses; fixture Q1 4.9 Q2 4.8 Q5 4.9 Q9 4.9, mean {:.1}", g.score_mean))
}

fn criterion_7() -> Check {
    let out = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_tmd"))
        .args(["bench", "--runs", "50", "--scenarios", "all", "--mode", "offline", "--out"])
        .arg(out.path())
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(status.success(), "tmd bench exited with {status}");
    ensure!(elapsed < Duration::from_secs(300), "bench took {elapsed:?}");

    let report: BenchReport =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("bench_report.json")).unwrap()).map_err(|e| e.to_string())?;
    ensure!(report.total == 150, "total {}", report.total);
    let records = read_meter_file(&out.path().join("meters.jsonl")).map_err(|e| e.to_string())?;
    ensure!(records.len() == 150, "{} persisted meter records", records.len());
    let mut worst = 0.0f64;
    for sc in &report.scenarios {
        ensure!(sc.n == 50 && sc.failures == 0, "{:?}: n={} failures={}", sc.scenario, sc.n, sc.failures);
        let walls: Vec<u64> = records.iter().filter(|r| r.scenario == sc.scenario).map(|r| r.wall_time_ms).collect();
        let tokens: Vec<u64> = records.iter().filter(|r| r.scenario == sc.scenario).map(|r| r.total_tokens()).collect();
        ensure!(walls.len() == 50, "{:?}: {} records on disk", sc.scenario, walls.len());
        let mean = walls.iter().sum::<u64>() as f64 / 50.0;
        let reported = sc.latency.ok_or("missing latency")?.mean_ms;
        worst = worst.max((mean - reported).abs());
        ensure!((mean - reported).abs() < 1.0, "{:?}: reported {reported} ms, recomputed {mean} ms", sc.scenario);
        let tmean = tokens.iter().sum::<u64>() as f64 / 50.0;
        ensure!(sc.tokens.ok_or("missing tokens")?.mean_total == tmean, "{:?}: token mean differs", sc.scenario);
    }
    Ok(format!("n=50 x 3 = 150; max mean deviation {worst:.3} ms; wall {:.1} s", elapsed.as_secs_f64()))
}

fn criterion_8() -> Check {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let engine = offline_engine(dir.path(), TextureSize::S512);
        engine.handle(prompt_request("crack on the rail").with_seed(7), Instant::now())
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    ensure!(a.tuned_prompt == b.tuned_prompt, "tuned prompts differ");
    ensure!(a.artifact.pixels == b.artifact.pixels, "pixels differ between runs");
    ensure!(pixel_digest(&a.artifact.pixels) == pixel_digest(&b.artifact.pixels), "pixel digests differ");
    let bare = |img: &RgbaImage| encode_png(img, &[]).unwrap();
    ensure!(bare(&a.artifact.pixels) == bare(&b.artifact.pixels), "encoded pixels differ");

    let dir = tempfile::tempdir().unwrap();
    let engine = Arc::new(offline_engine(dir.path(), TextureSize::S512));
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let engine = engine.clone();
            std::thread::spawn(move || engine.handle(prompt_request("crack on the rail").with_seed(7), Instant::now()))
        })
        .collect();
    let mut digests = HashSet::new();
    let mut prompts = HashSet::new();
    for h in handles {
        let out = h.join().unwrap().map_err(|e| e.to_string())?;
        ensure!(out.artifact.pixels == a.artifact.pixels, "a concurrent run diverged");
        digests.insert(pixel_digest(&out.artifact.pixels));
        prompts.insert(out.tuned_prompt);
    }
    ensure!(digests.len() == 1 && prompts.len() == 1, "concurrent runs disagree");
    Ok("2 sequential + 16 concurrent seed-7 runs: identical pixels, encodings and tuned prompt".into())
}

fn criterion_9() -> Check {
    let ds = build_dataset(&fixture_images(), &ForgeConfig::new(10, 0), &OfflineCaptioner::builtin(), &OfflineRephraser, created(), None)
        .map_err(|e| e.to_string())?;
    ensure!(ds.entries.len() == 50, "{} entries", ds.entries.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.jsonl");
    export_dataset(&ds, &path).map_err(|e| e.to_string())?;
    let back = import_dataset(&path).map_err(|e| e.to_string())?;
    ensure!(back == ds, "imported dataset differs from the exported one");

    let mut lines = Vec::new();
    for (name, want) in [
        ("missing_system.jsonl", 2),
        ("duplicate_pair.jsonl", 3),
        ("bad_schema.jsonl", 0),
        ("count_mismatch.jsonl", 1),
    ] {
        match import_dataset(&core_fixtures().join("datasets").join(name)) {
            Err(ForgeError::SchemaViolation { line, .. }) if line == want => lines.push(format!("{name}@{line}")),
            other => return Err(format!("{name}: expected a violation at line {want}, got {other:?}")),
        }
    }
    Ok(format!("50-entry round trip equal; {}", lines.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("cost formula exactness", criterion_1, Some(Duration::from_secs(1))),
        ("dataset forge", criterion_2, Some(Duration::from_secs(2))),
        ("scenario routing", criterion_3, None),
        ("masked compositing", criterion_4, None),
        ("standardization", criterion_5, None),
        ("usability scoring", criterion_6, None),
        ("offline bench", criterion_7, None),
        ("end-to-end determinism", criterion_8, None),
        ("dataset round trip", criterion_9, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let mut result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = started.elapsed();
        if let (Ok(_), Some(limit)) = (&result, limit) {
            if took >= limit {
                result = Err(format!("took {took:?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail} ({} ms)", i + 1, took.as_millis()),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why} ({} ms)", i + 1, took.as_millis());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

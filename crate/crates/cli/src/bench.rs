//! Latency/token/cost bench over the three scenarios.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use tmd_core::metering::{estimate_cost, latency_report, token_report, CostBreakdown, LatencyStats, MeterRecord, TokenStats};
use tmd_core::model::{Scenario, ScenarioKind, ScenarioRequest};
use tmd_core::pipeline::Engine;
use tmd_core::raster::{Mask, RgbaImage};
use tmd_core::synth::synthesize;

pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

const PROMPTS: &[&str] = &[
    "crack on the rail",
    "rust on fastener",
    "wear on the rail head",
    "decay on the sleeper",
    "squat on the rail head",
    "longitudinal crack on the rail web",
    "rust patch on the freight panel",
];

const INSTRUCTIONS: &[&str] = &["add a crack", "add rust", "add a squat", "add wear along the rail"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioBench {
    pub scenario: ScenarioKind,
    pub requested: usize,
    pub n: usize,
    pub failures: usize,
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
    pub latency: Option<LatencyStats>,
    pub tokens: Option<TokenStats>,
    pub cost: Option<CostBreakdown>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub runs: usize,
    pub total: usize,
    pub elapsed_ms: u64,
    pub scenarios: Vec<ScenarioBench>,
}

/// Inputs cycled by the bench, fixed per run index.
pub struct Workload {
    library_pairs: Vec<(String, String)>,
    photo: RgbaImage,
    mask: Mask,
}

impl Workload {
    pub fn new(engine: &Engine) -> Self {
        let lib = engine.library();
        let library_pairs = lib
            .materials
            .iter()
            .flat_map(|m| lib.defects.iter().map(|d| (m.material_id.clone(), d.defect_id.clone())))
            .collect();
        let photo = synthesize("clean steel rail head", 1, 640, 480, None);
        let mask = Mask::from_fn(640, 480, |x, y| (240..400).contains(&x) && (160..320).contains(&y));
        Self {
            library_pairs,
            photo,
            mask,
        }
    }

    pub fn request(&self, kind: ScenarioKind, i: usize) -> ScenarioRequest {
        let scenario = match kind {
            ScenarioKind::Library => {
                let (m, d) = &self.library_pairs[i % self.library_pairs.len()];
                Scenario::LibrarySelect {
                    material_id: m.clone(),
                    defect_id: d.clone(),
                }
            }
            ScenarioKind::Prompt => Scenario::CreativePrompt {
                text: PROMPTS[i % PROMPTS.len()].to_owned(),
            },
            ScenarioKind::Inpaint => Scenario::ImageInpaint {
                image: Some(self.photo.clone()),
                mask: Some(self.mask.clone()),
                instruction: INSTRUCTIONS[i % INSTRUCTIONS.len()].to_owned(),
            },
        };
        ScenarioRequest {
            request_id: String::new(),
            seed: Some(i as u64),
            scenario,
        }
    }
}

/// Runs `runs` sequential generations per scenario. A scenario stops early
/// after [`MAX_CONSECUTIVE_FAILURES`] failures in a row and is flagged
/// incomplete.
pub fn run_bench(engine: &Engine, scenarios: &[ScenarioKind], runs: usize, mode: &str) -> BenchReport {
    let started = Instant::now();
    let workload = Workload::new(engine);
    let mut out = Vec::new();
    for &kind in scenarios {
        let mut records: Vec<MeterRecord> = Vec::with_capacity(runs);
        let mut failures = 0;
        let mut streak = 0;
        let mut last_error = None;
        for i in 0..runs {
            match engine.handle(workload.request(kind, i), Instant::now()) {
                Ok(o) => {
                    streak = 0;
                    records.push(o.meter);
                }
                Err(e) => {
                    tracing::warn!(scenario = kind.as_str(), run = i, error = %e, "bench run failed");
                    failures += 1;
                    streak += 1;
                    last_error = Some(e.to_string());
                    if streak >= MAX_CONSECUTIVE_FAILURES {
                        break;
                    }
                }
            }
        }
        out.push(ScenarioBench {
            scenario: kind,
            requested: runs,
            n: records.len(),
            failures,
            incomplete: records.len() < runs,
            last_error,
            latency: latency_report(&records).remove(&kind),
            tokens: token_report(&records).remove(&kind),
            cost: estimate_cost(&records, engine.rates()).ok().filter(|_| !records.is_empty()),
        });
    }
    BenchReport {
        mode: mode.to_owned(),
        runs,
        total: out.iter().map(|s| s.n).sum(),
        elapsed_ms: started.elapsed().as_millis() as u64,
        scenarios: out,
    }
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<9}{:>5}{:>6}{:>10}{:>8}{:>8}{:>8}{:>8}{:>9}{:>12}",
            "scenario", "n", "fail", "mean_ms", "p50", "p95", "min", "max", "tokens", "cost"
        );
        for sc in &self.scenarios {
            let _ = write!(s, "{:<9}{:>5}{:>6}", sc.scenario.as_str(), sc.n, sc.failures);
            match &sc.latency {
                Some(l) => {
                    let _ = write!(
                        s,
                        "{:>10.1}{:>8}{:>8}{:>8}{:>8}",
                        l.mean_ms, l.p50_ms, l.p95_ms, l.min_ms, l.max_ms
                    );
                }
                None => {
                    let _ = write!(s, "{:>10}{:>8}{:>8}{:>8}{:>8}", "-", "-", "-", "-", "-");
                }
            }
            let tokens = sc.tokens.map_or("-".to_owned(), |t| format!("{:.1}", t.mean_total));
            let cost = sc.cost.map_or("-".to_owned(), |c| c.total.to_string());
            let _ = write!(s, "{tokens:>9}{cost:>12}");
            if sc.incomplete {
                s.push_str("  INCOMPLETE");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "total {} generations in {} ms", self.total, self.elapsed_ms);
        s
    }
}

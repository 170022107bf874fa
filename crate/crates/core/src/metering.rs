//! Token counting, wall-time records and the token-plus-time cost model.
//!
//! Costs are computed as
//!
//! ```text
//! C = Σ tokens_i × token_rate_i + Σ seconds_j × second_rate_j
//! ```
//!
//! over one list of [`MeterRecord`]s, each record looking up both rates by its
//! `backend_id`. All arithmetic is exact integer arithmetic in femto-currency
//! units (1e-15); rounding to micro-currency (half-even) happens only when a
//! [`Money`] value is presented.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::Add;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::ScenarioKind;

/// Counts tokens with the documented offline splitter.
///
/// A token is either a single ASCII punctuation character or a maximal run of
/// characters that are neither whitespace nor ASCII punctuation. So
/// `"crack, 2.5 mm"` is `crack` `,` `2` `.` `5` `mm`: six tokens.
pub fn count_tokens(text: &str) -> u64 {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            in_word = false;
        } else if c.is_ascii_punctuation() {
            count += 1;
            in_word = false;
        } else if !in_word {
            count += 1;
            in_word = true;
        }
    }
    count
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Parse,
    Validate,
    Tune,
    Route,
    Generate,
    Standardize,
    Meter,
    Persist,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Parse => "parse",
            Stage::Validate => "validate",
            Stage::Tune => "tune",
            Stage::Route => "route",
            Stage::Generate => "generate",
            Stage::Standardize => "standardize",
            Stage::Meter => "meter",
            Stage::Persist => "persist",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stage's start offset from the beginning of the request and its length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub start_us: u64,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterRecord {
    pub request_id: String,
    pub scenario: ScenarioKind,
    pub backend_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageTiming>,
}

impl MeterRecord {
    pub fn new(request_id: impl Into<String>, scenario: ScenarioKind, backend_id: impl Into<String>) -> Self {
        Self {
            request_id: request_id.into(),
            scenario,
            backend_id: backend_id.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            wall_time_ms: 0,
            stages: Vec::new(),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

const FEMTO_PER_UNIT: i128 = 1_000_000_000_000_000;
const PICO_PER_UNIT: i128 = 1_000_000_000_000;
const FEMTO_PER_MICRO: i128 = 1_000_000_000;

/// An exact currency amount in femto-units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i128);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_femto(femto: i128) -> Self {
        Money(femto)
    }

    pub fn femto(self) -> i128 {
        self.0
    }

    /// Rounds to micro-currency units, ties to even.
    pub fn micros(self) -> i128 {
        div_round_half_even(self.0, FEMTO_PER_MICRO)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / FEMTO_PER_UNIT as f64
    }
}

fn div_round_half_even(n: i128, d: i128) -> i128 {
    let q = n.div_euclid(d);
    let r = n.rem_euclid(d);
    match (2 * r).cmp(&d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q % 2 == 0 => q,
        std::cmp::Ordering::Equal => q + 1,
    }
}

impl Add for Money {
    type Output = Money;

    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let int = abs / FEMTO_PER_UNIT as u128;
        let frac = abs % FEMTO_PER_UNIT as u128;
        if frac == 0 {
            return write!(f, "{sign}{int}");
        }
        let digits = format!("{frac:015}");
        write!(f, "{sign}{int}.{}", digits.trim_end_matches('0'))
    }
}

impl FromStr for Money {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let v = parse_decimal(body, 15)?;
        Ok(Money(if neg { -v } else { v }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a non-negative decimal into an integer scaled by `10^scale`,
/// rejecting digits beyond `scale` places.
fn parse_decimal(s: &str, scale: u32) -> Result<i128, String> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(format!("{s:?} is not a decimal number"));
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("{s:?} is not a decimal number"));
    }
    let frac = frac.trim_end_matches('0');
    if frac.len() > scale as usize {
        return Err(format!("{s:?} has more than {scale} decimal places"));
    }
    let int_v: i128 = if int.is_empty() {
        0
    } else {
        int.parse().map_err(|_| format!("{s:?} is out of range"))?
    };
    let frac_v: i128 = if frac.is_empty() {
        0
    } else {
        frac.parse::<i128>().unwrap() * 10i128.pow(scale - frac.len() as u32)
    };
    int_v
        .checked_mul(10i128.pow(scale))
        .and_then(|v| v.checked_add(frac_v))
        .ok_or_else(|| format!("{s:?} is out of range"))
}

/// A non-negative price in pico-currency per unit (token or second).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(i128);

impl Rate {
    pub const ZERO: Rate = Rate(0);

    pub fn from_pico(pico: i128) -> Self {
        assert!(pico >= 0, "rates are non-negative");
        Rate(pico)
    }

    pub fn pico(self) -> i128 {
        self.0
    }
}

impl FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.starts_with('-') {
            return Err(format!("rate {s} is negative"));
        }
        parse_decimal(s, 12).map(Rate)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / PICO_PER_UNIT;
        let frac = self.0 % PICO_PER_UNIT;
        if frac == 0 {
            return write!(f, "{int}");
        }
        write!(f, "{int}.{}", format!("{frac:012}").trim_end_matches('0'))
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        // Display for f64 is the shortest string that round-trips, so JSON
        // numbers like 0.00002 convert without binary noise.
        let text = match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() => format!("{v}"),
            Raw::Num(v) => return Err(serde::de::Error::custom(format!("rate {v} is not finite"))),
            Raw::Str(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRates {
    pub token_rate: Rate,
    pub second_rate: Rate,
}

/// Per-backend prices. JSON form: `{"<backend_id>": {"token_rate": .., "second_rate": ..}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateCard {
    pub rates: BTreeMap<String, BackendRates>,
}

impl RateCard {
    pub fn with(mut self, backend_id: impl Into<String>, token_rate: &str, second_rate: &str) -> Self {
        self.rates.insert(
            backend_id.into(),
            BackendRates {
                token_rate: token_rate.parse().expect("valid token rate"),
                second_rate: second_rate.parse().expect("valid second rate"),
            },
        );
        self
    }

    pub fn load(path: &Path) -> Result<Self, MeterError> {
        let text = std::fs::read_to_string(path).map_err(|source| MeterError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| MeterError::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn get(&self, backend_id: &str) -> Option<&BackendRates> {
        self.rates.get(backend_id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub token_cost: Money,
    pub time_cost: Money,
    pub total: Money,
    pub records: usize,
}

impl Add for CostBreakdown {
    type Output = CostBreakdown;

    fn add(self, rhs: CostBreakdown) -> CostBreakdown {
        CostBreakdown {
            token_cost: self.token_cost + rhs.token_cost,
            time_cost: self.time_cost + rhs.time_cost,
            total: self.total + rhs.total,
            records: self.records + rhs.records,
        }
    }
}

#[derive(Debug, Error)]
pub enum MeterError {
    #[error("no rate for backend {0:?}")]
    UnknownBackendRate(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub fn estimate_cost(records: &[MeterRecord], rates: &RateCard) -> Result<CostBreakdown, MeterError> {
    let mut token_femto: i128 = 0;
    let mut time_femto: i128 = 0;
    for r in records {
        let rate = rates
            .get(&r.backend_id)
            .ok_or_else(|| MeterError::UnknownBackendRate(r.backend_id.clone()))?;
        // pico × 1000 = femto; pico/s × ms = femto
        token_femto += r.total_tokens() as i128 * rate.token_rate.pico() * 1000;
        time_femto += r.wall_time_ms as i128 * rate.second_rate.pico();
    }
    Ok(CostBreakdown {
        token_cost: Money(token_femto),
        time_cost: Money(time_femto),
        total: Money(token_femto + time_femto),
        records: records.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub min_ms: u64,
    pub max_ms: u64,
    pub p50_ms: u64,
    pub p95_ms: u64,
}

/// Nearest-rank percentile of a sorted, non-empty slice.
fn nearest_rank(sorted: &[u64], pct: u32) -> u64 {
    let rank = (pct as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_samples(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let sum: u128 = sorted.iter().map(|&v| v as u128).sum();
        Some(Self {
            n: sorted.len(),
            mean_ms: sum as f64 / sorted.len() as f64,
            min_ms: sorted[0],
            max_ms: *sorted.last().unwrap(),
            p50_ms: nearest_rank(&sorted, 50),
            p95_ms: nearest_rank(&sorted, 95),
        })
    }
}

/// Wall-time statistics per scenario. Scenarios without records are absent.
pub fn latency_report(records: &[MeterRecord]) -> BTreeMap<ScenarioKind, LatencyStats> {
    let mut groups: BTreeMap<ScenarioKind, Vec<u64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.scenario).or_default().push(r.wall_time_ms);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| LatencyStats::from_samples(&v).map(|s| (k, s)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub n: usize,
    pub mean_prompt: f64,
    pub mean_completion: f64,
    pub mean_total: f64,
    pub min_total: u64,
    pub max_total: u64,
}

pub fn token_report(records: &[MeterRecord]) -> BTreeMap<ScenarioKind, TokenStats> {
    let mut groups: BTreeMap<ScenarioKind, Vec<&MeterRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.scenario).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            let prompt: u64 = rs.iter().map(|r| r.prompt_tokens).sum();
            let completion: u64 = rs.iter().map(|r| r.completion_tokens).sum();
            let stats = TokenStats {
                n: rs.len(),
                mean_prompt: prompt as f64 / n,
                mean_completion: completion as f64 / n,
                mean_total: (prompt + completion) as f64 / n,
                min_total: rs.iter().map(|r| r.total_tokens()).min().unwrap_or(0),
                max_total: rs.iter().map(|r| r.total_tokens()).max().unwrap_or(0),
            };
            (k, stats)
        })
        .collect()
}

/// Append-only record store, optionally mirrored to a JSON Lines file.
#[derive(Debug, Default)]
pub struct MeterStore {
    inner: Mutex<StoreInner>,
}

#[derive(Debug, Default)]
struct StoreInner {
    records: Vec<MeterRecord>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl MeterStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a meter file, loading records already in it.
    pub fn open(path: &Path) -> Result<Self, MeterError> {
        let records = if path.exists() {
            read_meter_file(path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| MeterError::Io {
                path: path.to_owned(),
                source,
            })?;
        Ok(Self {
            inner: Mutex::new(StoreInner {
                records,
                file: Some(file),
                path: Some(path.to_owned()),
            }),
        })
    }

    pub fn append(&self, record: MeterRecord) -> Result<(), MeterError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("meter records serialize");
            line.push('\n');
            if let Err(source) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                return Err(MeterError::Io {
                    path: inner.path.clone().unwrap_or_default(),
                    source,
                });
            }
        }
        inner.records.push(record);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<MeterRecord> {
        self.inner.lock().unwrap().records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_meter_file(path: &Path) -> Result<Vec<MeterRecord>, MeterError> {
    let file = File::open(path).map_err(|source| MeterError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MeterError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| MeterError::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

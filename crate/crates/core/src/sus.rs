//! System Usability Scale scoring for the modified 10-item questionnaire.
//!
//! Items 6 and 7 are reverse scored. A response scores
//! `2.5 * (sum over positive items of (s - 1) + sum over items 6, 7 of (5 - s))`.
//! Per-question means in reports are taken over the raw 1-5 answers.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ITEMS: usize = 10;
/// 1-based numbers of the reverse-scored items.
pub const REVERSED_ITEMS: [usize; 2] = [6, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Ios,
    Android,
}

impl Platform {
    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Ios => "ios",
            Platform::Android => "android",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expertise {
    Expert,
    NonExpert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SusResponse {
    pub item_scores: Vec<i64>,
    pub scenario: u8,
    pub platform: Platform,
    pub expertise: Expertise,
}

impl SusResponse {
    pub fn new(item_scores: [i64; ITEMS], scenario: u8, platform: Platform, expertise: Expertise) -> Self {
        Self {
            item_scores: item_scores.to_vec(),
            scenario,
            platform,
            expertise,
        }
    }

    pub fn validate(&self) -> Result<(), SusError> {
        if self.item_scores.len() != ITEMS {
            return Err(SusError::WrongCount(self.item_scores.len()));
        }
        if let Some((i, &v)) = self.item_scores.iter().enumerate().find(|(_, v)| !(1..=5).contains(*v)) {
            return Err(SusError::InvalidScore { item: i + 1, value: v });
        }
        if !(1..=3).contains(&self.scenario) {
            return Err(SusError::InvalidScenario(self.scenario));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SusError {
    #[error("expected {ITEMS} item scores, got {0}")]
    WrongCount(usize),
    #[error("item q{item} score {value} is outside 1..=5")]
    InvalidScore { item: usize, value: i64 },
    #[error("scenario {0} is not 1, 2 or 3")]
    InvalidScenario(u8),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Raw points before the 2.5 multiplier, 0..=40.
fn points(r: &SusResponse) -> i64 {
    r.item_scores
        .iter()
        .enumerate()
        .map(|(i, &s)| if REVERSED_ITEMS.contains(&(i + 1)) { 5 - s } else { s - 1 })
        .sum()
}

pub fn score_sus(r: &SusResponse) -> Result<f64, SusError> {
    r.validate()?;
    Ok(points(r) as f64 * 2.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Scenario,
    Platform,
    ScenarioPlatform,
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scenario" => Ok(GroupBy::Scenario),
            "platform" => Ok(GroupBy::Platform),
            "scenario,platform" | "scenario_platform" | "both" => Ok(GroupBy::ScenarioPlatform),
            _ => Err(format!("unknown grouping {s:?}; use scenario, platform or scenario,platform")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusGroup {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub platform: Option<Platform>,
    pub n: usize,
    pub score_mean: f64,
    /// Raw answer means for q1..q10.
    pub question_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusReport {
    pub group_by: GroupBy,
    pub groups: Vec<SusGroup>,
}

impl SusReport {
    pub fn group(&self, scenario: Option<u8>, platform: Option<Platform>) -> Option<&SusGroup> {
        self.groups
            .iter()
            .find(|g| g.scenario == scenario && g.platform == platform)
    }

    /// Aligned plain-text table, one row per group.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<9}{:<9}{:>4}{:>8}", "scenario", "platform", "n", "score");
        for q in 1..=ITEMS {
            let _ = write!(out, "{:>6}", format!("q{q}"));
        }
        out.push('\n');
        for g in &self.groups {
            let scenario = g.scenario.map_or("-".to_owned(), |s| s.to_string());
            let platform = g.platform.map_or("-", Platform::as_str);
            let _ = write!(out, "{scenario:<9}{platform:<9}{:>4}{:>8.2}", g.n, g.score_mean);
            for m in &g.question_means {
                let _ = write!(out, "{m:>6.2}");
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for SusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Groups responses and averages each group. Empty groups do not appear.
pub fn aggregate_sus(responses: &[SusResponse], by: GroupBy) -> Result<SusReport, SusError> {
    #[derive(Default)]
    struct Acc {
        n: usize,
        points: i64,
        items: [i64; ITEMS],
    }
    let mut groups: BTreeMap<(Option<u8>, Option<Platform>), Acc> = BTreeMap::new();
    for r in responses {
        r.validate()?;
        let key = match by {
            GroupBy::Scenario => (Some(r.scenario), None),
            GroupBy::Platform => (None, Some(r.platform)),
            GroupBy::ScenarioPlatform => (Some(r.scenario), Some(r.platform)),
        };
        let acc = groups.entry(key).or_default();
        acc.n += 1;
        acc.points += points(r);
        for (sum, s) in acc.items.iter_mut().zip(&r.item_scores) {
            *sum += s;
        }
    }
    // Integer sums, one division each: a mean of 4.9 comes out as the literal 4.9.
    let groups = groups
        .into_iter()
        .map(|((scenario, platform), acc)| SusGroup {
            scenario,
            platform,
            n: acc.n,
            score_mean: acc.points as f64 * 2.5 / acc.n as f64,
            question_means: acc.items.iter().map(|&s| s as f64 / acc.n as f64).collect(),
        })
        .collect();
    Ok(SusReport { group_by: by, groups })
}

#[derive(Deserialize)]
struct CsvRow {
    scenario: u8,
    platform: Platform,
    expertise: Expertise,
    q1: i64,
    q2: i64,
    q3: i64,
    q4: i64,
    q5: i64,
    q6: i64,
    q7: i64,
    q8: i64,
    q9: i64,
    q10: i64,
}

const CSV_HEADER: [&str; 13] = [
    "scenario", "platform", "expertise", "q1", "q2", "q3", "q4", "q5", "q6", "q7", "q8", "q9", "q10",
];

/// Reads responses from CSV with header `scenario,platform,expertise,q1..q10`.
pub fn read_sus_csv<R: Read>(input: R) -> Result<Vec<SusResponse>, SusError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers().map_err(|e| SusError::Csv {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(CSV_HEADER) {
        return Err(SusError::Csv {
            line: 1,
            message: format!("header must be {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| SusError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let r = SusResponse::new(
            [
                row.q1, row.q2, row.q3, row.q4, row.q5, row.q6, row.q7, row.q8, row.q9, row.q10,
            ],
            row.scenario,
            row.platform,
            row.expertise,
        );
        r.validate().map_err(|e| SusError::Csv {
            line: out.len() as u64 + 2,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn load_sus_csv(path: &Path) -> Result<Vec<SusResponse>, SusError> {
    let file = std::fs::File::open(path).map_err(|source| SusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_sus_csv(file)
}

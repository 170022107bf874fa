//! Synthetic instruction-dataset forge.
//!
//! Each defect image is captioned, each caption is rephrased into `k`
//! distinct descriptions, every description is paired with a system message,
//! and the entries are merged into a duplicate-free dataset written as JSON
//! Lines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::backend::{BackendError, ChatClient};
use crate::model::DefectType;
use crate::tuner::extract_attributes;

pub const DATASET_SCHEMA: &str = "tmd-dataset/1";
pub const DEFAULT_CAPTION_TEMPLATE: &str = "defect-visual-v1";
pub const DEFAULT_SYSTEM_TEMPLATE: &str = "texture-forge-v1";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content-addressed image reference. String form: `sha256:<64 hex>|<path>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef {
    pub sha256: String,
    pub path: String,
}

impl ImageRef {
    pub fn of(bytes: &[u8], path: impl Into<String>) -> Self {
        Self {
            sha256: sha256_hex(bytes),
            path: path.into(),
        }
    }

    pub fn matches(&self, bytes: &[u8]) -> bool {
        self.sha256 == sha256_hex(bytes)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sha256:{}|{}", self.sha256, self.path)
    }
}

impl FromStr for ImageRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix("sha256:")
            .ok_or_else(|| format!("image_ref {s:?} lacks the sha256: prefix"))?;
        let (hash, path) = rest
            .split_once('|')
            .ok_or_else(|| format!("image_ref {s:?} lacks a |path part"))?;
        if hash.len() != 64 || !hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(format!("image_ref {s:?} has a malformed hash"));
        }
        Ok(Self {
            sha256: hash.to_owned(),
            path: path.to_owned(),
        })
    }
}

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextureCaption {
    pub image_ref: ImageRef,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSample {
    pub id: String,
    pub system_message: String,
    pub user_instruction: String,
    pub image_ref: ImageRef,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub k: usize,
    pub max_attempts_factor: usize,
    pub caption_template_id: String,
    pub system_template_id: String,
    pub seed: u64,
}

impl ForgeConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_attempts_factor: 10,
            caption_template_id: DEFAULT_CAPTION_TEMPLATE.to_owned(),
            system_template_id: DEFAULT_SYSTEM_TEMPLATE.to_owned(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.k < 1 {
            return Err(ForgeError::InvalidConfig("k must be at least 1".into()));
        }
        if self.max_attempts_factor < 2 {
            return Err(ForgeError::InvalidConfig("max_attempts_factor must be at least 2".into()));
        }
        Ok(())
    }

    pub fn max_attempts(&self) -> usize {
        self.max_attempts_factor * self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureDataset {
    pub entries: Vec<InstructionSample>,
    pub forge_config: ForgeConfig,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid forge config: {0}")]
    InvalidConfig(String),
    #[error("image is empty")]
    EmptyImage,
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("caption backend returned a blank caption")]
    EmptyCaption,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("only {got} of {k} distinct rephrasings for {image_ref} after {calls} backend calls")]
    ExhaustedAttempts {
        image_ref: String,
        got: usize,
        k: usize,
        calls: usize,
    },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("duplicate entry for {image_ref}: {response_text:?}")]
    DuplicateEntry { image_ref: String, response_text: String },
    #[error("{image_ref} has {count} entries, expected {k}")]
    CountMismatch { image_ref: String, count: usize, k: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

/// Prompt template asking a vision model to describe a defect image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionTemplate {
    pub id: &'static str,
    pub text: &'static str,
}

const CAPTION_TEMPLATES: &[CaptionTemplate] = &[CaptionTemplate {
    id: DEFAULT_CAPTION_TEMPLATE,
    text: "Describe the visual characteristics of the defect texture in this image of a railway component \
in one sentence: the defect type, its shape and approximate size, its orientation, its color and any \
discoloration, the surface roughness, and the material around it.",
}];

/// System and user message templates attached to each sample.
/// `{defect}` and `{component}` are filled from the caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemTemplate {
    pub id: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

const SYSTEM_TEMPLATES: &[SystemTemplate] = &[SystemTemplate {
    id: DEFAULT_SYSTEM_TEMPLATE,
    system: "You are a railway inspection assistant specialized in defect textures. The image shows {defect} \
on {component}. The answer is a language-model rephrasing of a vision-model caption of the image; describe \
defect textures with their type, size, location, orientation and color.",
    user: "Describe the defect texture in this image.",
}];

pub fn caption_template(id: &str) -> Result<&'static CaptionTemplate, ForgeError> {
    CAPTION_TEMPLATES
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| ForgeError::UnknownTemplate(id.to_owned()))
}

pub fn system_template(id: &str) -> Result<&'static SystemTemplate, ForgeError> {
    SYSTEM_TEMPLATES
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| ForgeError::UnknownTemplate(id.to_owned()))
}

pub trait CaptionBackend: Send + Sync {
    fn caption(&self, template: &CaptionTemplate, image: &[u8]) -> Result<String, BackendError>;
}

pub trait RephraseBackend: Send + Sync {
    /// One new description of `caption`; `attempt` counts calls for this caption.
    fn rephrase(&self, caption: &TextureCaption, attempt: usize, seed: u64) -> Result<String, BackendError>;
}

const BUILTIN_CAPTIONS: &str = include_str!("../data/captions.json");

/// Caption lookup keyed by the SHA-256 of the image bytes.
#[derive(Debug, Clone, Default)]
pub struct OfflineCaptioner {
    table: BTreeMap<String, String>,
}

impl OfflineCaptioner {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Self { table }
    }

    /// Captions for the shipped fixture images.
    pub fn builtin() -> Self {
        Self::new(serde_json::from_str(BUILTIN_CAPTIONS).expect("shipped caption table is valid"))
    }
}

impl CaptionBackend for OfflineCaptioner {
    fn caption(&self, _template: &CaptionTemplate, image: &[u8]) -> Result<String, BackendError> {
        let hash = sha256_hex(image);
        Ok(self.table.get(&hash).cloned().unwrap_or_else(|| {
            format!(
                "A railway component surface with uncatalogued wear and discoloration (image {}).",
                &hash[..12]
            )
        }))
    }
}

const PHRASINGS: [&str; 8] = [
    "{C}{q}.",
    "In this image, {c}{q}.",
    "Close-up view: {c}{q}.",
    "On inspection, {c}{q}.",
    "The photo shows that {c}{q}.",
    "Inspection note: {c}{q}.",
    "Surface detail: {c}{q}.",
    "Defect texture description: {c}{q}.",
];

const QUALIFIERS: [&str; 7] = [
    "",
    ", under diffuse daylight",
    ", seen from directly above",
    ", at close range",
    ", with a shallow depth of field",
    ", in overcast conditions",
    ", under low-angle lighting",
];

/// Deterministic rephraser cycling through eight phrasings, then through the
/// same phrasings with lighting/viewpoint qualifiers (56 distinct outputs).
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineRephraser;

impl OfflineRephraser {
    pub const DISTINCT: usize = PHRASINGS.len() * QUALIFIERS.len();

    pub fn phrase(caption: &str, index: usize) -> String {
        let index = index % Self::DISTINCT;
        let body = caption.trim().trim_end_matches('.').trim_end();
        let mut chars = body.chars();
        let (upper, lower) = match chars.next() {
            Some(first) => (
                first.to_uppercase().chain(chars.clone()).collect::<String>(),
                first.to_lowercase().chain(chars).collect::<String>(),
            ),
            None => (String::new(), String::new()),
        };
        PHRASINGS[index % PHRASINGS.len()]
            .replace("{C}", &upper)
            .replace("{c}", &lower)
            .replace("{q}", QUALIFIERS[index / PHRASINGS.len()])
    }
}

impl RephraseBackend for OfflineRephraser {
    fn rephrase(&self, caption: &TextureCaption, attempt: usize, seed: u64) -> Result<String, BackendError> {
        let offset = (seed % Self::DISTINCT as u64) as usize;
        Ok(Self::phrase(&caption.text, offset + attempt))
    }
}

fn image_data_url(image: &[u8]) -> String {
    let mime = if image.starts_with(b"\x89PNG") {
        "image/png"
    } else if image.starts_with(&[0xff, 0xd8]) {
        "image/jpeg"
    } else {
        "application/octet-stream"
    };
    format!("data:{mime};base64,{}", B64.encode(image))
}

/// Vision captioner over a chat-completion endpoint.
#[derive(Debug)]
pub struct RemoteCaptioner {
    client: ChatClient,
}

impl RemoteCaptioner {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl CaptionBackend for RemoteCaptioner {
    fn caption(&self, template: &CaptionTemplate, image: &[u8]) -> Result<String, BackendError> {
        let message = json!({
            "role": "user",
            "content": [
                {"type": "text", "text": template.text},
                {"type": "image_url", "image_url": {"url": image_data_url(image)}},
            ],
        });
        Ok(self.client.chat(vec![message])?.text)
    }
}

#[derive(Debug)]
pub struct RemoteRephraser {
    client: ChatClient,
}

impl RemoteRephraser {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl RephraseBackend for RemoteRephraser {
    fn rephrase(&self, caption: &TextureCaption, attempt: usize, seed: u64) -> Result<String, BackendError> {
        let system = format!(
            "Rephrase the defect texture description in one concise sentence. Keep every visual detail and \
vary the wording. Variation {attempt}, seed {seed}."
        );
        Ok(self
            .client
            .chat(vec![
                json!({"role": "system", "content": system}),
                json!({"role": "user", "content": caption.text}),
            ])?
            .text)
    }
}

/// Canonical form used for uniqueness: NFC, trailing whitespace removed.
pub fn normalize_text(s: &str) -> String {
    s.nfc().collect::<String>().trim_end().to_owned()
}

pub fn caption_image(
    image: &[u8],
    path: &str,
    template_id: &str,
    backend: &dyn CaptionBackend,
) -> Result<TextureCaption, ForgeError> {
    if image.is_empty() {
        return Err(ForgeError::EmptyImage);
    }
    let template = caption_template(template_id)?;
    let text = normalize_text(&backend.caption(template, image)?);
    if text.trim().is_empty() {
        return Err(ForgeError::EmptyCaption);
    }
    Ok(TextureCaption {
        image_ref: ImageRef::of(image, path),
        text,
    })
}

/// Collects `config.k` distinct rephrasings, in the order they were produced,
/// making at most `config.max_attempts()` backend calls.
pub fn rephrase_caption(
    caption: &TextureCaption,
    config: &ForgeConfig,
    backend: &dyn RephraseBackend,
) -> Result<Vec<String>, ForgeError> {
    config.validate()?;
    let mut seen = HashSet::with_capacity(config.k);
    let mut out = Vec::with_capacity(config.k);
    let mut calls = 0;
    while out.len() < config.k {
        if calls == config.max_attempts() {
            return Err(ForgeError::ExhaustedAttempts {
                image_ref: caption.image_ref.to_string(),
                got: out.len(),
                k: config.k,
                calls,
            });
        }
        let text = normalize_text(&backend.rephrase(caption, calls, config.seed)?);
        calls += 1;
        if !text.trim().is_empty() && seen.insert(text.clone()) {
            out.push(text);
        }
    }
    Ok(out)
}

fn sample_id(image_ref: &ImageRef, response_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(image_ref.to_string().as_bytes());
    h.update(b"\n");
    h.update(response_text.as_bytes());
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

pub fn attach_system_message(
    caption: &TextureCaption,
    response_text: &str,
    template_id: &str,
) -> Result<InstructionSample, ForgeError> {
    if caption.text.trim().is_empty() {
        return Err(ForgeError::EmptyInput("caption"));
    }
    if response_text.trim().is_empty() {
        return Err(ForgeError::EmptyInput("response text"));
    }
    let template = system_template(template_id)?;
    let (defect, component) = match extract_attributes(&caption.text) {
        Ok(spec) => {
            let component = if spec.component == "unspecified" {
                "a railway component".to_owned()
            } else {
                format!("the {}", spec.component)
            };
            let defect = match spec.defect_type {
                DefectType::Rust | DefectType::Wear | DefectType::Decay => spec.defect_type.to_string(),
                _ => format!("a {}", spec.defect_type),
            };
            (defect, component)
        }
        Err(_) => ("surface damage".to_owned(), "a railway component".to_owned()),
    };
    Ok(InstructionSample {
        id: sample_id(&caption.image_ref, response_text),
        system_message: template.system.replace("{defect}", &defect).replace("{component}", &component),
        user_instruction: template.user.to_owned(),
        image_ref: caption.image_ref.clone(),
        response_text: response_text.to_owned(),
    })
}

fn check_sample(s: &InstructionSample) -> Result<(), &'static str> {
    for (name, v) in [
        ("id", &s.id),
        ("system message", &s.system_message),
        ("user instruction", &s.user_instruction),
        ("response text", &s.response_text),
    ] {
        if v.trim().is_empty() {
            return Err(name);
        }
    }
    Ok(())
}

/// Merges samples into a dataset sorted by `(image_ref, response_text)`.
pub fn assemble_dataset(
    samples: Vec<InstructionSample>,
    config: &ForgeConfig,
    created_at: DateTime<Utc>,
) -> Result<TextureDataset, ForgeError> {
    config.validate()?;
    let mut pairs = HashSet::with_capacity(samples.len());
    let mut ids = HashSet::with_capacity(samples.len());
    let mut counts: BTreeMap<&ImageRef, usize> = BTreeMap::new();
    for s in &samples {
        check_sample(s).map_err(ForgeError::EmptyInput)?;
        if !pairs.insert((&s.image_ref, s.response_text.as_str())) || !ids.insert(s.id.as_str()) {
            return Err(ForgeError::DuplicateEntry {
                image_ref: s.image_ref.to_string(),
                response_text: s.response_text.clone(),
            });
        }
        *counts.entry(&s.image_ref).or_default() += 1;
    }
    if let Some((image_ref, &count)) = counts.iter().find(|(_, &c)| c != config.k) {
        return Err(ForgeError::CountMismatch {
            image_ref: image_ref.to_string(),
            count,
            k: config.k,
        });
    }
    drop(pairs);
    drop(ids);
    drop(counts);
    let mut entries = samples;
    entries.sort_by(|a, b| {
        a.image_ref
            .to_string()
            .cmp(&b.image_ref.to_string())
            .then_with(|| a.response_text.cmp(&b.response_text))
    });
    Ok(TextureDataset {
        entries,
        forge_config: config.clone(),
        created_at,
    })
}

/// Image file handed to the forge.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub path: String,
    pub bytes: Vec<u8>,
}

/// Backend call counters from a forge run.
#[derive(Debug, Default)]
pub struct ForgeStats {
    pub caption_calls: AtomicU64,
    pub rephrase_calls: AtomicU64,
}

struct CountingRephraser<'a> {
    inner: &'a dyn RephraseBackend,
    calls: &'a AtomicU64,
}

impl RephraseBackend for CountingRephraser<'_> {
    fn rephrase(&self, caption: &TextureCaption, attempt: usize, seed: u64) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.rephrase(caption, attempt, seed)
    }
}

/// Runs the full pipeline, one caption per task.
pub fn build_dataset(
    images: &[SourceImage],
    config: &ForgeConfig,
    captioner: &dyn CaptionBackend,
    rephraser: &dyn RephraseBackend,
    created_at: DateTime<Utc>,
    stats: Option<&ForgeStats>,
) -> Result<TextureDataset, ForgeError> {
    config.validate()?;
    let fallback = ForgeStats::default();
    let stats = stats.unwrap_or(&fallback);
    let per_image: Vec<Vec<InstructionSample>> = images
        .par_iter()
        .map(|img| {
            stats.caption_calls.fetch_add(1, Ordering::Relaxed);
            let caption = caption_image(&img.bytes, &img.path, &config.caption_template_id, captioner)?;
            let counting = CountingRephraser {
                inner: rephraser,
                calls: &stats.rephrase_calls,
            };
            rephrase_caption(&caption, config, &counting)?
                .iter()
                .map(|t| attach_system_message(&caption, t, &config.system_template_id))
                .collect()
        })
        .collect::<Result<_, ForgeError>>()?;
    assemble_dataset(per_image.into_iter().flatten().collect(), config, created_at)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema: String,
    k: usize,
    seed: u64,
    max_attempts_factor: usize,
    caption_template_id: String,
    system_template_id: String,
    created_at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserPart {
    text: String,
    image_ref: ImageRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    id: String,
    system: String,
    user: UserPart,
    assistant: String,
}

/// Serializes a dataset: header on line 0, one entry per following line, LF endings.
pub fn dataset_to_jsonl(dataset: &TextureDataset) -> String {
    let cfg = &dataset.forge_config;
    let header = HeaderLine {
        schema: DATASET_SCHEMA.to_owned(),
        k: cfg.k,
        seed: cfg.seed,
        max_attempts_factor: cfg.max_attempts_factor,
        caption_template_id: cfg.caption_template_id.clone(),
        system_template_id: cfg.system_template_id.clone(),
        created_at: dataset.created_at,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for e in &dataset.entries {
        let line = EntryLine {
            id: e.id.clone(),
            system: e.system_message.clone(),
            user: UserPart {
                text: e.user_instruction.clone(),
                image_ref: e.image_ref.clone(),
            },
            assistant: e.response_text.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("entry serializes"));
        out.push('\n');
    }
    out
}

pub fn export_dataset(dataset: &TextureDataset, path: &Path) -> Result<(), ForgeError> {
    std::fs::write(path, dataset_to_jsonl(dataset)).map_err(|source| ForgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn violation(line: usize, message: impl Into<String>) -> ForgeError {
    ForgeError::SchemaViolation {
        line,
        message: message.into(),
    }
}

/// Parses and fully validates a dataset file. Line numbers count from the
/// header at line 0.
pub fn dataset_from_jsonl(text: &str) -> Result<TextureDataset, ForgeError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let mut lines = body.split('\n').enumerate();
    let (_, header_text) = lines.next().ok_or_else(|| violation(0, "missing header"))?;
    if header_text.ends_with('\r') {
        return Err(violation(0, "CRLF line ending"));
    }
    let header: HeaderLine = serde_json::from_str(header_text).map_err(|e| violation(0, e.to_string()))?;
    if header.schema != DATASET_SCHEMA {
        return Err(violation(0, format!("unsupported schema {:?}", header.schema)));
    }
    let config = ForgeConfig {
        k: header.k,
        max_attempts_factor: header.max_attempts_factor,
        caption_template_id: header.caption_template_id,
        system_template_id: header.system_template_id,
        seed: header.seed,
    };
    config.validate().map_err(|e| violation(0, e.to_string()))?;

    let mut entries = Vec::new();
    let mut pair_lines: HashMap<(ImageRef, String), usize> = HashMap::new();
    let mut id_lines: HashMap<String, usize> = HashMap::new();
    let mut first_line: BTreeMap<ImageRef, (usize, usize)> = BTreeMap::new();
    for (line_no, line) in lines {
        if line.ends_with('\r') {
            return Err(violation(line_no, "CRLF line ending"));
        }
        let e: EntryLine = serde_json::from_str(line).map_err(|err| violation(line_no, err.to_string()))?;
        let sample = InstructionSample {
            id: e.id,
            system_message: e.system,
            user_instruction: e.user.text,
            image_ref: e.user.image_ref,
            response_text: e.assistant,
        };
        check_sample(&sample).map_err(|field| violation(line_no, format!("empty {field}")))?;
        if let Some(prev) = pair_lines.insert((sample.image_ref.clone(), sample.response_text.clone()), line_no) {
            return Err(violation(
                line_no,
                format!("duplicate (image_ref, response) pair, first seen on line {prev}"),
            ));
        }
        if let Some(prev) = id_lines.insert(sample.id.clone(), line_no) {
            return Err(violation(line_no, format!("duplicate id {:?}, first seen on line {prev}", sample.id)));
        }
        first_line.entry(sample.image_ref.clone()).or_insert((line_no, 0)).1 += 1;
        entries.push(sample);
    }
    if let Some((image_ref, (line, count))) = first_line.iter().find(|(_, (_, c))| *c != config.k) {
        return Err(violation(
            *line,
            format!("{image_ref} has {count} entries, expected k = {}", config.k),
        ));
    }
    Ok(TextureDataset {
        entries,
        forge_config: config,
        created_at: header.created_at,
    })
}

pub fn import_dataset(path: &Path) -> Result<TextureDataset, ForgeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ForgeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    dataset_from_jsonl(&text)
}

//! The generation pipeline: validate, tune, route, generate, standardize,
//! meter, persist. Each stage is timed into the request's [`MeterRecord`] and
//! any failure is reported as a [`StageError`] naming the stage.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::BackendError;
use crate::gateway::{route, BackendKind, BackendRegistry, GatewayError, GenRequest};
use crate::metering::{estimate_cost, CostBreakdown, MeterRecord, MeterStore, RateCard, Stage, StageTiming};
use crate::model::{
    lookup_defect, validate_request, DefectLibrary, ImageFormat, Provenance, Scenario, ScenarioRequest,
    TextureArtifact, ValidationError,
};
use crate::raster::RgbaImage;
use crate::texture::{encode_artifact, standardize_pixels, StandardizationTarget};
use crate::tuner::{tune_prompt, OfflineTuner, TuneError, TunerBackend};

/// How a seed is chosen when the request carries none.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SeedPolicy {
    Fixed { seed: u64 },
    /// Derived from the request id, so every request differs.
    #[default]
    FromRequestId,
}


impl SeedPolicy {
    pub fn seed_for(self, request_id: &str) -> u64 {
        match self {
            SeedPolicy::Fixed { seed } => seed,
            SeedPolicy::FromRequestId => {
                let d = Sha256::digest(request_id.as_bytes());
                u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{stage} failed ({code}): {message}")]
pub struct StageError {
    pub stage: Stage,
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl StageError {
    fn new(stage: Stage, status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            stage,
            code: code.to_owned(),
            message: message.into(),
            status,
        }
    }
}

fn validation_code(e: &ValidationError) -> &'static str {
    match e {
        ValidationError::MissingImage => "missing_image",
        ValidationError::EmptyImage => "empty_image",
        ValidationError::MaskMismatch { .. } => "mask_mismatch",
        ValidationError::EmptyPrompt => "empty_prompt",
        ValidationError::EmptySelection => "empty_selection",
        ValidationError::EmptyRequestId => "empty_request_id",
    }
}

fn backend_stage_error(stage: Stage, e: &BackendError) -> StageError {
    if e.is_timeout() {
        StageError::new(stage, 504, "backend_timeout", e.to_string())
    } else {
        StageError::new(stage, 502, "backend_unavailable", e.to_string())
    }
}

fn tune_error(e: TuneError) -> StageError {
    match &e {
        TuneError::Backend(b) => backend_stage_error(Stage::Tune, b),
        TuneError::UntunablePrompt { .. } | TuneError::NoDefectFound | TuneError::EmptyText => {
            StageError::new(Stage::Tune, 422, "untunable_prompt", e.to_string())
        }
        TuneError::Library(_) => StageError::new(Stage::Tune, 422, "unknown_library_entry", e.to_string()),
    }
}

fn gateway_error(e: GatewayError) -> StageError {
    match &e {
        GatewayError::Timeout { .. } => StageError::new(Stage::Generate, 504, "backend_timeout", e.to_string()),
        GatewayError::InvalidRequest(_) => StageError::new(Stage::Generate, 422, "invalid_generation", e.to_string()),
        GatewayError::NoBackendForKind(_) => StageError::new(Stage::Route, 502, "no_backend", e.to_string()),
        GatewayError::BackendUnavailable { .. } | GatewayError::EmptyOutput { .. } => {
            StageError::new(Stage::Generate, 502, "backend_unavailable", e.to_string())
        }
    }
}

/// Client-supplied ids end up in file names.
fn valid_request_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// SHA-256 over the big-endian width, height and raw RGBA bytes.
pub fn pixel_digest(img: &RgbaImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_be_bytes());
    h.update(img.height().to_be_bytes());
    h.update(img.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub target: StandardizationTarget,
    pub artifact_dir: PathBuf,
    pub seed_policy: SeedPolicy,
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub request_id: String,
    pub artifact: TextureArtifact,
    pub png: Vec<u8>,
    pub artifact_path: PathBuf,
    pub artifact_sha256: String,
    pub tuned_prompt: String,
    pub meter: MeterRecord,
    pub cost: CostBreakdown,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no backend bound for {0:?}")]
    MissingBackend(BackendKind),
    #[error("rate card has no entry for backend {0:?}")]
    MissingRate(String),
    #[error("artifact dir {path}: {source}")]
    ArtifactDir {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

struct StageClock {
    origin: Instant,
    stages: Vec<StageTiming>,
}

impl StageClock {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage,
            start_us: start.duration_since(self.origin).as_micros() as u64,
            elapsed_us: start.elapsed().as_micros() as u64,
        });
        out
    }
}

pub struct Engine {
    library: Arc<DefectLibrary>,
    tuner: Arc<dyn TunerBackend>,
    registry: BackendRegistry,
    rates: RateCard,
    meters: Arc<MeterStore>,
    settings: EngineSettings,
    issued_ids: Mutex<HashSet<String>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("tuner", &self.tuner.id())
            .field("registry", &self.registry)
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(
        library: Arc<DefectLibrary>,
        tuner: Arc<dyn TunerBackend>,
        registry: BackendRegistry,
        rates: RateCard,
        meters: Arc<MeterStore>,
        settings: EngineSettings,
    ) -> Result<Self, EngineError> {
        for kind in BackendKind::ALL {
            let id = registry.backend_id(kind).ok_or(EngineError::MissingBackend(kind))?;
            if rates.get(id).is_none() {
                return Err(EngineError::MissingRate(id.to_owned()));
            }
        }
        std::fs::create_dir_all(&settings.artifact_dir).map_err(|source| EngineError::ArtifactDir {
            path: settings.artifact_dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            library,
            tuner,
            registry,
            rates,
            meters,
            settings,
            issued_ids: Mutex::new(HashSet::new()),
        })
    }

    /// Offline engine: builtin library, template tuner, procedural backends
    /// and the given rates.
    pub fn offline(
        rates: RateCard,
        meters: Arc<MeterStore>,
        settings: EngineSettings,
    ) -> Result<Self, EngineError> {
        let library = Arc::new(DefectLibrary::builtin());
        Self::new(
            library.clone(),
            Arc::new(OfflineTuner::new(library)),
            BackendRegistry::offline(),
            rates,
            meters,
            settings,
        )
    }

    pub fn library(&self) -> &DefectLibrary {
        &self.library
    }

    pub fn rates(&self) -> &RateCard {
        &self.rates
    }

    pub fn meters(&self) -> &MeterStore {
        &self.meters
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn artifact_path(&self, request_id: &str) -> Option<PathBuf> {
        valid_request_id(request_id).then(|| self.settings.artifact_dir.join(format!("{request_id}.png")))
    }

    fn claim_request_id(&self, requested: &str) -> Result<String, StageError> {
        let mut issued = self.issued_ids.lock().unwrap();
        if requested.is_empty() {
            loop {
                let id = ulid::Ulid::new().to_string();
                if issued.insert(id.clone()) {
                    return Ok(id);
                }
            }
        }
        if !valid_request_id(requested) {
            return Err(StageError::new(
                Stage::Validate,
                422,
                "invalid_request_id",
                "request ids are 1-64 characters of A-Z, a-z, 0-9, '-' and '_'",
            ));
        }
        let exists = self.settings.artifact_dir.join(format!("{requested}.png")).exists();
        if exists || !issued.insert(requested.to_owned()) {
            return Err(StageError::new(
                Stage::Validate,
                409,
                "duplicate_request_id",
                format!("request id {requested:?} was already used"),
            ));
        }
        Ok(requested.to_owned())
    }

    /// Runs the pipeline. `received` is when the request arrived; the time
    /// until now is booked as the parse stage. An empty `request_id` gets a
    /// fresh ULID.
    pub fn handle(&self, mut request: ScenarioRequest, received: Instant) -> Result<GenerateOutcome, StageError> {
        let mut clock = StageClock {
            origin: received,
            stages: vec![StageTiming {
                stage: Stage::Parse,
                start_us: 0,
                elapsed_us: received.elapsed().as_micros() as u64,
            }],
        };

        let request = clock.run(Stage::Validate, || {
            request.request_id = self.claim_request_id(request.request_id.trim())?;
            let request =
                validate_request(request).map_err(|e| StageError::new(Stage::Validate, 422, validation_code(&e), e.to_string()))?;
            if let Scenario::LibrarySelect {
                material_id,
                defect_id,
            } = &request.scenario
            {
                lookup_defect(&self.library, material_id, defect_id)
                    .map_err(|e| StageError::new(Stage::Validate, 422, "unknown_library_entry", e.to_string()))?;
            }
            Ok::<_, StageError>(request)
        })?;
        let request_id = request.request_id.clone();
        let scenario = request.kind();
        let seed = request.seed.unwrap_or_else(|| self.settings.seed_policy.seed_for(&request_id));

        let tuned = clock.run(Stage::Tune, || tune_prompt(&request, &self.library, self.tuner.as_ref()).map_err(tune_error))?;

        let kind = clock.run(Stage::Route, || {
            let kind = route(scenario);
            if self.registry.has(kind) {
                Ok(kind)
            } else {
                Err(gateway_error(GatewayError::NoBackendForKind(kind)))
            }
        })?;

        let side = self.settings.target.size.pixels();
        let gen = match request.scenario {
            Scenario::ImageInpaint { image, mask, .. } => {
                GenRequest::edit(&tuned.refined_text, image.expect("validated"), mask, seed)
            }
            _ => GenRequest::text(&tuned.refined_text, side, side, seed),
        };
        let (raw, generated) = clock.run(Stage::Generate, || {
            self.registry
                .generate(&gen, kind, &request_id, scenario)
                .map_err(gateway_error)
        })?;
        drop(gen);

        let pixels = clock.run(Stage::Standardize, || {
            standardize_pixels(&raw, self.settings.target)
                .map_err(|e| StageError::new(Stage::Standardize, 422, "standardize_failed", e.to_string()))
        })?;

        let mut meter = generated;
        meter.prompt_tokens = tuned.prompt_tokens;
        meter.completion_tokens = tuned.completion_tokens;
        meter.wall_time_ms = received.elapsed().as_millis() as u64;
        let cost = clock.run(Stage::Meter, || {
            estimate_cost(std::slice::from_ref(&meter), &self.rates)
                .map_err(|e| StageError::new(Stage::Meter, 500, "meter_failed", e.to_string()))
        })?;
        meter.stages = clock.stages.clone();

        let artifact = TextureArtifact {
            pixels,
            format: ImageFormat::Png,
            provenance: Provenance {
                request_id: request_id.clone(),
                scenario,
                backend_id: meter.backend_id.clone(),
                original_prompt: tuned.original.clone(),
                tuned_prompt: tuned.refined_text.clone(),
                seed,
                meter: meter.clone(),
            },
        };
        let artifact_path = self.settings.artifact_dir.join(format!("{request_id}.png"));
        let png = clock.run(Stage::Persist, || {
            let png = encode_artifact(&artifact)
                .map_err(|e| StageError::new(Stage::Persist, 500, "encode_failed", e.to_string()))?;
            write_atomic(&artifact_path, &png)
                .map_err(|e| StageError::new(Stage::Persist, 500, "persist_failed", e.to_string()))?;
            Ok::<_, StageError>(png)
        })?;
        meter.stages = clock.stages;
        self.meters
            .append(meter.clone())
            .map_err(|e| StageError::new(Stage::Persist, 500, "persist_failed", e.to_string()))?;

        Ok(GenerateOutcome {
            artifact_sha256: pixel_digest(&artifact.pixels),
            request_id,
            tuned_prompt: tuned.refined_text,
            artifact,
            png,
            artifact_path,
            meter,
            cost,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("png.partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

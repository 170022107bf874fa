//! Defect-texture generation engine for railway components.
//!
//! The [`pipeline::Engine`] turns a [`ScenarioRequest`] into a standardized
//! PNG texture: the request is validated, its prompt refined by a tuner
//! backend, routed to a text-to-image or image-edit backend, standardized to a
//! square power-of-two raster, metered and persisted. Offline backends are
//! deterministic, so every stage can run without network access.

pub mod backend;
pub mod forge;
pub mod gateway;
pub mod metering;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod sus;
pub mod synth;
pub mod texture;
pub mod tuner;

pub use gateway::{route, BackendKind, BackendRegistry};
pub use metering::{count_tokens, estimate_cost, CostBreakdown, MeterRecord, Money, RateCard};
pub use model::{
    DefectLibrary, DefectSpec, Scenario, ScenarioKind, ScenarioRequest, TextureArtifact, ValidationError,
};
pub use pipeline::{Engine, EngineSettings, GenerateOutcome, SeedPolicy, StageError};
pub use raster::{Mask, RgbaImage};
pub use texture::{StandardizationTarget, TextureSize};

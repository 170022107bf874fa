//! Scenario routing and dispatch to image-generation backends.

use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{BackendError, InFlightLimit, JsonPoster};
use crate::metering::MeterRecord;
use crate::model::ScenarioKind;
use crate::raster::{Mask, RgbaImage};
use crate::synth::synthesize;
use crate::texture::{composite_inpaint, decode_png, encode_mask_png, encode_png, resize_bilinear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    TextToImage,
    ImageEdit,
}

impl BackendKind {
    pub const ALL: [BackendKind; 2] = [BackendKind::TextToImage, BackendKind::ImageEdit];
}

/// Library and prompt scenarios go to text-to-image; inpainting goes to the
/// image-edit model.
pub fn route(kind: ScenarioKind) -> BackendKind {
    match kind {
        ScenarioKind::Library | ScenarioKind::Prompt => BackendKind::TextToImage,
        ScenarioKind::Inpaint => BackendKind::ImageEdit,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub prompt: String,
    pub base_image: Option<RgbaImage>,
    pub mask: Option<Mask>,
    pub out_width: u32,
    pub out_height: u32,
    pub seed: u64,
}

impl GenRequest {
    pub fn text(prompt: impl Into<String>, width: u32, height: u32, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            base_image: None,
            mask: None,
            out_width: width,
            out_height: height,
            seed,
        }
    }

    /// An edit of `base`; output size follows the base image.
    pub fn edit(prompt: impl Into<String>, base: RgbaImage, mask: Option<Mask>, seed: u64) -> Self {
        let (w, h) = base.dimensions();
        Self {
            prompt: prompt.into(),
            base_image: Some(base),
            mask,
            out_width: w,
            out_height: h,
            seed,
        }
    }

    pub fn validate(&self, kind: BackendKind) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_owned()));
        if self.prompt.trim().is_empty() {
            return bad("prompt is empty");
        }
        if self.out_width == 0 || self.out_height == 0 {
            return bad("output size must be positive");
        }
        match (kind, &self.base_image) {
            (BackendKind::ImageEdit, None) => return bad("image edit needs a base image"),
            (BackendKind::TextToImage, Some(_)) => return bad("text-to-image takes no base image"),
            (BackendKind::ImageEdit, Some(base)) if base.dimensions() != (self.out_width, self.out_height) => {
                return bad("image edit output size must equal the base image size");
            }
            _ => {}
        }
        if let Some(mask) = &self.mask {
            match &self.base_image {
                Some(base) if base.dimensions() == mask.dimensions() => {}
                Some(_) => return bad("mask size differs from base image"),
                None => return bad("mask without a base image"),
            }
        }
        Ok(())
    }
}

/// Raw backend output.
#[derive(Debug, Clone, PartialEq)]
pub struct GenOutput {
    pub image: RgbaImage,
    /// Processing time as reported by the backend, if any.
    pub reported_ms: Option<u64>,
}

pub trait GenBackend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &GenRequest) -> Result<GenOutput, BackendError>;
}

/// In-process procedural synthesizer; a pure function of the request.
#[derive(Debug, Clone, Default)]
pub struct ProceduralBackend {
    id: String,
}

impl ProceduralBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

/// The offline backend's core: masked edits keep pixels outside the mask.
pub fn synthesize_procedural(req: &GenRequest) -> RgbaImage {
    let raw = synthesize(&req.prompt, req.seed, req.out_width, req.out_height, req.base_image.as_ref());
    match (&req.base_image, &req.mask) {
        (Some(base), Some(mask)) => composite_inpaint(base, mask, &raw).expect("validated sizes"),
        _ => raw,
    }
}

impl GenBackend for ProceduralBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenOutput, BackendError> {
        Ok(GenOutput {
            image: synthesize_procedural(req),
            reported_ms: None,
        })
    }
}

/// Remote image endpoint speaking
/// `{"prompt", "image_b64"?, "mask_b64"?, "width", "height", "seed"}` →
/// `{"image_b64", "elapsed_ms"}` with base64 PNG images.
#[derive(Debug)]
pub struct RemoteImageBackend {
    id: String,
    poster: JsonPoster,
}

impl RemoteImageBackend {
    pub fn new(id: impl Into<String>, poster: JsonPoster) -> Self {
        Self { id: id.into(), poster }
    }
}

fn png_b64(bytes: Vec<u8>) -> String {
    B64.encode(bytes)
}

impl GenBackend for RemoteImageBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenOutput, BackendError> {
        let encode_err = |e: crate::texture::TextureError| BackendError::BadResponse(e.to_string());
        let mut body = json!({
            "prompt": req.prompt,
            "width": req.out_width,
            "height": req.out_height,
            "seed": req.seed,
        });
        if let Some(base) = &req.base_image {
            body["image_b64"] = json!(png_b64(encode_png(base, &[]).map_err(encode_err)?));
        }
        if let Some(mask) = &req.mask {
            body["mask_b64"] = json!(png_b64(encode_mask_png(mask).map_err(encode_err)?));
        }
        let resp = self.poster.post(&body)?;
        let b64 = resp["image_b64"]
            .as_str()
            .ok_or_else(|| BackendError::BadResponse("missing image_b64".into()))?;
        let bytes = B64
            .decode(b64)
            .map_err(|e| BackendError::BadResponse(format!("image_b64: {e}")))?;
        let image = decode_png(&bytes)
            .map_err(|e| BackendError::BadResponse(format!("image_b64: {e}")))?
            .image;
        Ok(GenOutput {
            image,
            reported_ms: resp["elapsed_ms"].as_u64(),
        })
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no backend bound for {0:?}")]
    NoBackendForKind(BackendKind),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend_id} unavailable: {source}")]
    BackendUnavailable {
        backend_id: String,
        #[source]
        source: BackendError,
    },
    #[error("backend {backend_id} timed out: {source}")]
    Timeout {
        backend_id: String,
        #[source]
        source: BackendError,
    },
    #[error("backend {backend_id} returned an empty image")]
    EmptyOutput { backend_id: String },
}

struct Binding {
    kind: BackendKind,
    backend: Arc<dyn GenBackend>,
    limit: InFlightLimit,
}

/// Backends bound to kinds; read-only once built.
#[derive(Default)]
pub struct BackendRegistry {
    bindings: Vec<Binding>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.bindings.iter().map(|b| (b.kind, b.backend.id().to_owned(), b.limit.max())))
            .finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the procedural backend bound to both kinds.
    pub fn offline() -> Self {
        let mut r = Self::new();
        r.bind(BackendKind::TextToImage, Arc::new(ProceduralBackend::new("offline-t2i")), None);
        r.bind(BackendKind::ImageEdit, Arc::new(ProceduralBackend::new("offline-edit")), None);
        r
    }

    /// Binds a backend. The first binding for a kind is the one used.
    pub fn bind(&mut self, kind: BackendKind, backend: Arc<dyn GenBackend>, max_in_flight: Option<usize>) {
        self.bindings.push(Binding {
            kind,
            backend,
            limit: InFlightLimit::new(max_in_flight),
        });
    }

    pub fn has(&self, kind: BackendKind) -> bool {
        self.bindings.iter().any(|b| b.kind == kind)
    }

    pub fn backend_id(&self, kind: BackendKind) -> Option<&str> {
        self.bindings.iter().find(|b| b.kind == kind).map(|b| b.backend.id())
    }

    /// Runs one generation. The result always has the requested size, and for
    /// masked edits every pixel outside the mask equals the base image.
    pub fn generate(
        &self,
        req: &GenRequest,
        kind: BackendKind,
        request_id: &str,
        scenario: ScenarioKind,
    ) -> Result<(RgbaImage, MeterRecord), GatewayError> {
        req.validate(kind)?;
        let binding = self
            .bindings
            .iter()
            .find(|b| b.kind == kind)
            .ok_or(GatewayError::NoBackendForKind(kind))?;
        let backend_id = binding.backend.id().to_owned();
        let started = Instant::now();
        let out = {
            let _permit = binding.limit.acquire();
            binding.backend.generate(req)
        };
        let out = out.map_err(|source| {
            if source.is_timeout() {
                GatewayError::Timeout {
                    backend_id: backend_id.clone(),
                    source,
                }
            } else {
                GatewayError::BackendUnavailable {
                    backend_id: backend_id.clone(),
                    source,
                }
            }
        })?;
        if out.image.is_empty() {
            return Err(GatewayError::EmptyOutput { backend_id });
        }
        let mut image = out.image;
        if image.dimensions() != (req.out_width, req.out_height) {
            image = resize_bilinear(&image, req.out_width, req.out_height);
        }
        if let (Some(base), Some(mask)) = (&req.base_image, &req.mask) {
            image = composite_inpaint(base, mask, &image).expect("validated sizes");
        }
        let mut meter = MeterRecord::new(request_id, scenario, backend_id);
        meter.wall_time_ms = started.elapsed().as_millis() as u64;
        Ok((image, meter))
    }
}

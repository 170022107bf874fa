//! Shared domain types: defect attributes, scenario requests, the defect
//! library and texture artifacts.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metering::MeterRecord;
use crate::raster::{Mask, RgbaImage};

/// Kind of surface damage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum DefectType {
    Crack,
    Rust,
    Wear,
    Decay,
    Squat,
    Custom(String),
}

impl DefectType {
    pub const BUILTIN: [DefectType; 5] = [
        DefectType::Crack,
        DefectType::Rust,
        DefectType::Wear,
        DefectType::Decay,
        DefectType::Squat,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            DefectType::Crack => "crack",
            DefectType::Rust => "rust",
            DefectType::Wear => "wear",
            DefectType::Decay => "decay",
            DefectType::Squat => "squat",
            DefectType::Custom(s) => s,
        }
    }
}

impl From<String> for DefectType {
    fn from(s: String) -> Self {
        match s.as_str() {
            "crack" => DefectType::Crack,
            "rust" => DefectType::Rust,
            "wear" => DefectType::Wear,
            "decay" => DefectType::Decay,
            "squat" => DefectType::Squat,
            _ => DefectType::Custom(s),
        }
    }
}

impl From<DefectType> for String {
    fn from(d: DefectType) -> Self {
        d.as_str().to_owned()
    }
}

impl fmt::Display for DefectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeUnit {
    Inch,
    Mm,
}

impl SizeUnit {
    /// Unit as it reads after a number, pluralized for inches.
    pub fn label(self, value: f64) -> &'static str {
        match self {
            SizeUnit::Inch if value == 1.0 => "inch",
            SizeUnit::Inch => "inches",
            SizeUnit::Mm => "mm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSize {
    pub value: f64,
    pub unit: SizeUnit,
}

impl fmt::Display for DefectSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.value, self.unit.label(self.value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Transverse,
    Longitudinal,
    Diagonal,
    #[default]
    Unspecified,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Transverse => "transverse",
            Orientation::Longitudinal => "longitudinal",
            Orientation::Diagonal => "diagonal",
            Orientation::Unspecified => "unspecified",
        }
    }
}

/// Normalized bounding box; coordinates in `[0, 1]`, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x0)
            && (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y0)
            && (0.0..=1.0).contains(&self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    /// Normalizes a pixel-space box with exclusive upper bounds.
    pub fn from_pixels(x0: u32, y0: u32, x1: u32, y1: u32, width: u32, height: u32) -> Self {
        Self {
            x0: x0 as f64 / width as f64,
            y0: y0 as f64 / height as f64,
            x1: x1 as f64 / width as f64,
            y1: y1 as f64 / height as f64,
        }
    }

    /// Name of the 3×3 grid cell containing the box center, e.g. "top-left",
    /// "middle-right", "center".
    pub fn region_name(&self) -> &'static str {
        let cell = |v: f64| ((v * 3.0).floor() as usize).min(2);
        let col = cell((self.x0 + self.x1) / 2.0);
        let row = cell((self.y0 + self.y1) / 2.0);
        REGION_NAMES[row * 3 + col]
    }

    /// Inverse of [`BBox::region_name`]: the grid cell a region name denotes.
    pub fn from_region_name(name: &str) -> Option<Self> {
        let idx = REGION_NAMES.iter().position(|n| *n == name)?;
        let (row, col) = (idx / 3, idx % 3);
        Some(Self::new(
            col as f64 / 3.0,
            row as f64 / 3.0,
            (col + 1) as f64 / 3.0,
            (row + 1) as f64 / 3.0,
        ))
    }
}

/// 3×3 grid cells, row-major.
pub const REGION_NAMES: [&str; 9] = [
    "top-left",
    "top-center",
    "top-right",
    "middle-left",
    "center",
    "middle-right",
    "bottom-left",
    "bottom-center",
    "bottom-right",
];

/// Structured defect attributes exchanged between prompts and tuners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub defect_type: DefectType,
    pub component: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<DefectSize>,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_notes: Option<String>,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<(), String> {
        if let DefectType::Custom(text) = &self.defect_type {
            if text.trim().is_empty() {
                return Err("custom defect type needs a non-empty label".into());
            }
        }
        if let Some(bb) = &self.location {
            if !bb.is_valid() {
                return Err(format!(
                    "location ({}, {}, {}, {}) is not an ordered box inside [0,1]",
                    bb.x0, bb.y0, bb.x1, bb.y1
                ));
            }
        }
        if let Some(size) = &self.size {
            if !(size.value > 0.0 && size.value.is_finite()) {
                return Err(format!("size must be positive, got {}", size.value));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Library,
    Prompt,
    Inpaint,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Library, ScenarioKind::Prompt, ScenarioKind::Inpaint];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Library => "library",
            ScenarioKind::Prompt => "prompt",
            ScenarioKind::Inpaint => "inpaint",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "library" => Ok(ScenarioKind::Library),
            "prompt" => Ok(ScenarioKind::Prompt),
            "inpaint" => Ok(ScenarioKind::Inpaint),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

/// The three interaction modes and their payloads.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    LibrarySelect {
        material_id: String,
        defect_id: String,
    },
    CreativePrompt {
        text: String,
    },
    ImageInpaint {
        image: Option<RgbaImage>,
        mask: Option<Mask>,
        instruction: String,
    },
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::LibrarySelect { .. } => ScenarioKind::Library,
            Scenario::CreativePrompt { .. } => ScenarioKind::Prompt,
            Scenario::ImageInpaint { .. } => ScenarioKind::Inpaint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRequest {
    pub request_id: String,
    pub seed: Option<u64>,
    pub scenario: Scenario,
}

impl ScenarioRequest {
    pub fn new(request_id: impl Into<String>, scenario: Scenario) -> Self {
        Self {
            request_id: request_id.into(),
            seed: None,
            scenario,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn kind(&self) -> ScenarioKind {
        self.scenario.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("inpaint request has no image")]
    MissingImage,
    #[error("inpaint image has zero width or height")]
    EmptyImage,
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    MaskMismatch {
        image_w: u32,
        image_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("library selection needs both a material id and a defect id")]
    EmptySelection,
    #[error("request id is empty")]
    EmptyRequestId,
}

/// Checks every request invariant, returning the request unchanged on success.
pub fn validate_request(raw: ScenarioRequest) -> Result<ScenarioRequest, ValidationError> {
    if raw.request_id.trim().is_empty() {
        return Err(ValidationError::EmptyRequestId);
    }
    match &raw.scenario {
        Scenario::LibrarySelect {
            material_id,
            defect_id,
        } => {
            if material_id.trim().is_empty() || defect_id.trim().is_empty() {
                return Err(ValidationError::EmptySelection);
            }
        }
        Scenario::CreativePrompt { text } => {
            if text.trim().is_empty() {
                return Err(ValidationError::EmptyPrompt);
            }
        }
        Scenario::ImageInpaint {
            image,
            mask,
            instruction,
        } => {
            let image = image.as_ref().ok_or(ValidationError::MissingImage)?;
            if image.is_empty() {
                return Err(ValidationError::EmptyImage);
            }
            if let Some(mask) = mask {
                if mask.dimensions() != image.dimensions() {
                    return Err(ValidationError::MaskMismatch {
                        image_w: image.width(),
                        image_h: image.height(),
                        mask_w: mask.width(),
                        mask_h: mask.height(),
                    });
                }
            }
            if instruction.trim().is_empty() {
                return Err(ValidationError::EmptyPrompt);
            }
        }
    }
    Ok(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub material_id: String,
    pub display_name: String,
    pub base_texture_ref: String,
    /// Words in free text that refer to this material.
    #[serde(default)]
    pub aliases: Vec<String>,
    /// Noun phrase used after "located on", e.g. "the head of the rail".
    pub surface_phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectTemplate {
    pub defect_id: String,
    pub template: DefectSpec,
    /// Short prompt with a `{component}` placeholder.
    pub prompt_fragment: String,
    /// Noun phrase used in tuned sentences, e.g. "patch of rust".
    pub noun: String,
    /// Word following the size, e.g. "long" or "in diameter".
    pub size_descriptor: String,
    /// Extra words in free text that identify this defect.
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("unknown material {0:?}")]
    UnknownMaterial(String),
    #[error("unknown defect {0:?}")]
    UnknownDefect(String),
    #[error("invalid library: {0}")]
    Invalid(String),
    #[error("cannot read library: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse library: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Predefined materials and defects for library-based selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectLibrary {
    #[serde(default)]
    pub version: String,
    pub materials: Vec<Material>,
    pub defects: Vec<DefectTemplate>,
}

const BUILTIN_LIBRARY: &str = include_str!("../data/defect_library.json");

impl DefectLibrary {
    /// The fixture library shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_LIBRARY).expect("shipped defect library is valid")
    }

    pub fn empty() -> Self {
        Self {
            version: String::new(),
            materials: Vec::new(),
            defects: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        let lib: DefectLibrary = serde_json::from_str(text)?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), LibraryError> {
        let mut seen = HashSet::new();
        for m in &self.materials {
            if m.material_id.is_empty() || !seen.insert(m.material_id.as_str()) {
                return Err(LibraryError::Invalid(format!(
                    "material id {:?} is empty or duplicated",
                    m.material_id
                )));
            }
        }
        let mut seen = HashSet::new();
        for d in &self.defects {
            if d.defect_id.is_empty() || !seen.insert(d.defect_id.as_str()) {
                return Err(LibraryError::Invalid(format!(
                    "defect id {:?} is empty or duplicated",
                    d.defect_id
                )));
            }
            d.template
                .validate()
                .map_err(|e| LibraryError::Invalid(format!("defect {:?}: {e}", d.defect_id)))?;
            if d.prompt_fragment.trim().is_empty() || d.noun.trim().is_empty() {
                return Err(LibraryError::Invalid(format!(
                    "defect {:?} has an empty prompt fragment or noun",
                    d.defect_id
                )));
            }
        }
        Ok(())
    }

    pub fn material(&self, material_id: &str) -> Option<&Material> {
        self.materials.iter().find(|m| m.material_id == material_id)
    }

    pub fn defect(&self, defect_id: &str) -> Option<&DefectTemplate> {
        self.defects.iter().find(|d| d.defect_id == defect_id)
    }

    /// Template for a defect type, if the library has one.
    pub fn defect_for_type(&self, ty: &DefectType) -> Option<&DefectTemplate> {
        self.defects.iter().find(|d| &d.template.defect_type == ty)
    }
}

/// Result of a successful library lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryHit<'a> {
    pub material: &'a Material,
    pub defect: &'a DefectTemplate,
    /// Template attributes with the component set to the material.
    pub spec: DefectSpec,
    /// `prompt_fragment` rendered for the material.
    pub prompt: String,
}

pub fn lookup_defect<'a>(
    library: &'a DefectLibrary,
    material_id: &str,
    defect_id: &str,
) -> Result<LibraryHit<'a>, LibraryError> {
    let material = library
        .material(material_id)
        .ok_or_else(|| LibraryError::UnknownMaterial(material_id.to_owned()))?;
    let defect = library
        .defect(defect_id)
        .ok_or_else(|| LibraryError::UnknownDefect(defect_id.to_owned()))?;
    let mut spec = defect.template.clone();
    spec.component = material.display_name.clone();
    let prompt = defect.prompt_fragment.replace("{component}", &material.display_name);
    Ok(LibraryHit {
        material,
        defect,
        spec,
        prompt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Png,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub request_id: String,
    pub scenario: ScenarioKind,
    pub backend_id: String,
    pub original_prompt: String,
    pub tuned_prompt: String,
    pub seed: u64,
    pub meter: MeterRecord,
}

impl Provenance {
    pub fn is_complete(&self) -> bool {
        !self.request_id.is_empty()
            && !self.backend_id.is_empty()
            && !self.original_prompt.is_empty()
            && !self.tuned_prompt.is_empty()
            && self.meter.request_id == self.request_id
    }
}

/// A standardized texture plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureArtifact {
    pub pixels: RgbaImage,
    pub format: ImageFormat,
    pub provenance: Provenance,
}

impl TextureArtifact {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// Square with power-of-two sides.
    pub fn is_standardized(&self) -> bool {
        let (w, h) = self.pixels.dimensions();
        w == h && w.is_power_of_two()
    }
}

//! Prompt tuning: rewrite a terse request into one attribute-rich defect
//! sentence before image generation.

use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{BackendError, ChatClient, Completion};
use crate::metering::count_tokens;
use crate::model::{
    lookup_defect, BBox, DefectLibrary, DefectSize, DefectSpec, DefectType, LibraryError, Orientation, Scenario,
    ScenarioRequest, SizeUnit, REGION_NAMES,
};

/// System prompt sent with every tuning call.
pub const TUNER_SYSTEM_PROMPT: &str = "You rewrite short requests for railway defect textures into one precise \
sentence for an image generator. State the defect type, its approximate size, where it is located on the \
component, its orientation and any discoloration. Reply with the sentence only.";

pub trait TunerBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedPrompt {
    pub original: String,
    pub refined_text: String,
    pub attributes: DefectSpec,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("tuner output lacks a defect and two of size/location/orientation/color: {last_output:?}")]
    UntunablePrompt { last_output: String },
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("no defect keyword found")]
    NoDefectFound,
    #[error("prompt text is empty")]
    EmptyText,
}

const DEFECT_KEYWORDS: &[(&str, &[&str])] = &[
    ("crack", &["crack", "cracks", "cracked", "cracking", "fracture", "fissure"]),
    ("rust", &["rust", "rusty", "rusted", "corrosion", "corroded", "oxidation"]),
    ("wear", &["wear", "worn", "abrasion", "abraded"]),
    ("decay", &["decay", "decayed", "rot", "rotten", "rotting", "deterioration", "spalling"]),
    ("squat", &["squat", "squats"]),
];

const ORIENTATION_KEYWORDS: &[(Orientation, &[&str])] = &[
    (Orientation::Transverse, &["transverse", "transversal", "crosswise"]),
    (Orientation::Longitudinal, &["longitudinal", "lengthwise"]),
    (Orientation::Diagonal, &["diagonal", "diagonally", "oblique"]),
];

const COMPONENT_KEYWORDS: &[(&str, &[&str])] = &[
    ("rail head", &["head of the rail", "rail head", "railhead"]),
    ("rail web", &["web of the rail", "rail web"]),
    ("fastener", &["fastener", "fasteners", "clip", "bolt"]),
    ("sleeper", &["sleeper", "sleepers", "crosstie"]),
    ("freight panel", &["freight panel", "freight car", "freight wagon"]),
    ("rail", &["rail", "track"]),
];

const COLOR_WORDS: &[&str] = &[
    "discoloration",
    "discolouration",
    "discolored",
    "red",
    "reddish",
    "orange",
    "brown",
    "black",
    "dark",
    "grey",
    "gray",
    "white",
    "yellow",
    "green",
    "blue",
    "metallic",
    "shiny",
    "sheen",
];

static SIZE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(\d+(?:\.\d+)?)\s*(inches|inch|in\b|mm|millimet(?:er|re)s?|cm|centimet(?:er|re)s?)").unwrap()
});
static WITH_CLAUSE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bwith ([^,.;]+)").unwrap());
static LOCATION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(located|situated|positioned)\s+(on|at|in|along|near)\b").unwrap());

fn find_word(haystack: &str, word: &str) -> Option<usize> {
    // haystack is lowercase; word boundaries on both sides
    let bytes = haystack.as_bytes();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(word) {
        let start = from + pos;
        let end = start + word.len();
        let before_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let after_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + 1;
    }
    None
}

/// Earliest match among `(label, words)` groups; longer words win ties.
fn earliest<'a, T: Copy>(text: &str, table: &'a [(T, &'a [&'a str])]) -> Option<T> {
    table
        .iter()
        .flat_map(|(label, words)| words.iter().filter_map(move |w| find_word(text, w).map(|p| (p, w.len(), *label))))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, _, label)| label)
}

fn parse_size(text: &str) -> Option<DefectSize> {
    let caps = SIZE_RE.captures(text)?;
    let value: f64 = caps[1].parse().ok()?;
    let unit = caps[2].to_ascii_lowercase();
    let size = if unit.starts_with("in") {
        DefectSize {
            value,
            unit: SizeUnit::Inch,
        }
    } else if unit.starts_with("cm") || unit.starts_with("centi") {
        DefectSize {
            value: value * 10.0,
            unit: SizeUnit::Mm,
        }
    } else {
        DefectSize {
            value,
            unit: SizeUnit::Mm,
        }
    };
    (size.value > 0.0).then_some(size)
}

fn parse_color(text: &str) -> Option<String> {
    for caps in WITH_CLAUSE_RE.captures_iter(text) {
        let clause = caps[1].trim();
        if COLOR_WORDS.iter().any(|w| find_word(clause, w).is_some()) {
            return Some(clause.to_owned());
        }
    }
    COLOR_WORDS
        .iter()
        .filter_map(|w| find_word(text, w).map(|p| (p, *w)))
        .min()
        .map(|(_, w)| w.to_owned())
}

fn parse_region(text: &str) -> Option<&'static str> {
    REGION_NAMES
        .iter()
        .filter_map(|name| find_word(text, name).map(|p| (p, std::cmp::Reverse(name.len()), *name)))
        .min()
        .map(|(_, _, n)| n)
}

/// Which attribute kinds a text mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Mentions {
    pub defect: bool,
    pub size: bool,
    pub location: bool,
    pub orientation: bool,
    pub color: bool,
}

impl Mentions {
    pub fn of(text: &str) -> Self {
        let lower = text.to_lowercase();
        Self {
            defect: earliest(&lower, DEFECT_KEYWORDS).is_some(),
            size: parse_size(&lower).is_some(),
            location: LOCATION_RE.is_match(&lower) || parse_region(&lower).is_some(),
            orientation: earliest(&lower, ORIENTATION_KEYWORDS).is_some(),
            color: parse_color(&lower).is_some(),
        }
    }

    /// A defect plus at least two of size, location, orientation and color.
    pub fn is_tuned(&self) -> bool {
        let extras = [self.size, self.location, self.orientation, self.color]
            .iter()
            .filter(|&&b| b)
            .count();
        self.defect && extras >= 2
    }
}

/// Best-effort parse of defect attributes from free text.
pub fn extract_attributes(refined_text: &str) -> Result<DefectSpec, TuneError> {
    if refined_text.trim().is_empty() {
        return Err(TuneError::EmptyText);
    }
    let lower = refined_text.to_lowercase();
    let defect = earliest(&lower, DEFECT_KEYWORDS).ok_or(TuneError::NoDefectFound)?;
    Ok(DefectSpec {
        defect_type: DefectType::from(defect.to_owned()),
        component: earliest(&lower, COMPONENT_KEYWORDS).unwrap_or("unspecified").to_owned(),
        location: parse_region(&lower).and_then(BBox::from_region_name),
        size: parse_size(&lower),
        orientation: earliest(&lower, ORIENTATION_KEYWORDS).unwrap_or_default(),
        color_notes: parse_color(&lower),
    })
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some(c) if "aeiouAEIOU".contains(c) => "An",
        _ => "A",
    }
}

/// Deterministic slot-filling tuner over the defect library.
///
/// Output shape:
/// `A[n] {orientation} {noun}, approximately {size} {descriptor}, located on
/// {surface}[ in the {region} region], with {color notes}.`
/// Attributes stated in the input override the library template; inputs with
/// no recognizable defect are echoed back unchanged.
#[derive(Debug, Clone)]
pub struct OfflineTuner {
    library: Arc<DefectLibrary>,
}

impl OfflineTuner {
    pub const ID: &'static str = "offline-tuner";

    pub fn new(library: Arc<DefectLibrary>) -> Self {
        Self { library }
    }

    pub fn rewrite(&self, user_prompt: &str) -> String {
        let lower_owned = user_prompt.to_lowercase();
        let lower = lower_owned.as_str();
        let defect = self
            .library
            .defects
            .iter()
            .flat_map(|d| {
                std::iter::once(d.defect_id.as_str())
                    .chain(d.keywords.iter().map(String::as_str))
                    .filter_map(move |w| find_word(lower, &w.to_lowercase()).map(|p| (p, std::cmp::Reverse(w.len()), d)))
            })
            .min_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)))
            .map(|(_, _, d)| d);
        let Some(defect) = defect else {
            return user_prompt.to_owned();
        };
        let material = self
            .library
            .materials
            .iter()
            .flat_map(|m| {
                m.aliases
                    .iter()
                    .filter_map(move |a| find_word(lower, &a.to_lowercase()).map(|p| (std::cmp::Reverse(a.len()), p, m)))
            })
            .min_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)))
            .map(|(_, _, m)| m)
            .or_else(|| self.library.materials.first());

        let tpl = &defect.template;
        let orientation = earliest(lower, ORIENTATION_KEYWORDS).unwrap_or(tpl.orientation);
        let size = parse_size(lower).or(tpl.size);
        let color = COLOR_WORDS
            .iter()
            .filter(|w| !w.starts_with("discolo"))
            .filter_map(|w| find_word(lower, w).map(|p| (p, *w)))
            .min()
            .map(|(_, w)| format!("{w} discoloration"))
            .or_else(|| tpl.color_notes.clone());

        let mut head = String::new();
        if orientation != Orientation::Unspecified {
            head.push_str(orientation.as_str());
            head.push(' ');
        }
        head.push_str(&defect.noun);
        let mut out = format!("{} {head}", article(&head));
        if let Some(size) = size {
            out.push_str(&format!(", approximately {size} {}", defect.size_descriptor));
        }
        let surface = material
            .map(|m| m.surface_phrase.clone())
            .unwrap_or_else(|| format!("the {}", tpl.component));
        out.push_str(&format!(", located on {surface}"));
        if let Some(region) = parse_region(lower) {
            out.push_str(&format!(" in the {region} region"));
        }
        if let Some(color) = color {
            out.push_str(&format!(", with {color}"));
        }
        out.push('.');
        out
    }
}

impl TunerBackend for OfflineTuner {
    fn id(&self) -> &str {
        Self::ID
    }

    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<Completion, BackendError> {
        let text = self.rewrite(user_prompt);
        Ok(Completion {
            prompt_tokens: count_tokens(system_prompt) + count_tokens(user_prompt),
            completion_tokens: count_tokens(&text),
            text,
        })
    }
}

/// Tuner backed by a remote chat-completion endpoint.
#[derive(Debug)]
pub struct RemoteTuner {
    id: String,
    client: ChatClient,
}

impl RemoteTuner {
    pub fn new(id: impl Into<String>, client: ChatClient) -> Self {
        Self { id: id.into(), client }
    }
}

impl TunerBackend for RemoteTuner {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<Completion, BackendError> {
        self.client.chat(vec![
            json!({"role": "system", "content": system_prompt}),
            json!({"role": "user", "content": user_prompt}),
        ])
    }
}

/// The text sent to the tuner for a request, and any library context.
fn tuner_input(request: &ScenarioRequest, library: &DefectLibrary) -> Result<(String, String, Option<String>), TuneError> {
    Ok(match &request.scenario {
        Scenario::LibrarySelect {
            material_id,
            defect_id,
        } => {
            let hit = lookup_defect(library, material_id, defect_id)?;
            (hit.prompt.clone(), hit.prompt, Some(hit.material.display_name.clone()))
        }
        Scenario::CreativePrompt { text } => (text.clone(), text.clone(), None),
        Scenario::ImageInpaint { mask, instruction, image } => {
            let mut user = instruction.clone();
            if let (Some(mask), Some(image)) = (mask, image) {
                if let Some((x0, y0, x1, y1)) = mask.bounding_box() {
                    let bb = BBox::from_pixels(x0, y0, x1, y1, image.width(), image.height());
                    user.push_str(&format!(" in the {} region", bb.region_name()));
                }
            }
            (instruction.clone(), user, None)
        }
    })
}

/// Refines a validated request into a [`TunedPrompt`], retrying once when the
/// backend's output lacks the required attributes.
pub fn tune_prompt(
    request: &ScenarioRequest,
    library: &DefectLibrary,
    backend: &dyn TunerBackend,
) -> Result<TunedPrompt, TuneError> {
    let (original, user_prompt, component) = tuner_input(request, library)?;
    let mut prompt_tokens = 0;
    let mut completion_tokens = 0;
    let mut last_output = String::new();
    for _ in 0..2 {
        let c = backend.complete(TUNER_SYSTEM_PROMPT, &user_prompt)?;
        prompt_tokens += c.prompt_tokens;
        completion_tokens += c.completion_tokens;
        let text = c.text.trim().to_owned();
        if Mentions::of(&text).is_tuned() {
            if let Ok(mut attributes) = extract_attributes(&text) {
                if attributes.validate().is_ok() {
                    if let Some(component) = &component {
                        attributes.component = component.clone();
                    }
                    return Ok(TunedPrompt {
                        original,
                        refined_text: text,
                        attributes,
                        prompt_tokens,
                        completion_tokens,
                    });
                }
            }
        }
        last_output = text;
    }
    Err(TuneError::UntunablePrompt { last_output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Mask, RgbaImage};
    use std::sync::atomic::{AtomicUsize, Ordering};

    const REFERENCE_TUNED: &str = "A transverse crack, approximately 2 inches long, located on the head of the rail, \
with slight rust discoloration around the edges.";

    fn offline() -> OfflineTuner {
        OfflineTuner::new(Arc::new(DefectLibrary::builtin()))
    }

    fn prompt(text: &str) -> ScenarioRequest {
        ScenarioRequest::new("t", Scenario::CreativePrompt { text: text.into() })
    }

    #[test]
    fn crack_on_the_rail() {
        let lib = DefectLibrary::builtin();
        let tuned = tune_prompt(&prompt("crack on the rail"), &lib, &offline()).unwrap();
        assert_eq!(tuned.refined_text, REFERENCE_TUNED);
        assert_eq!(tuned.original, "crack on the rail");
        assert_eq!(tuned.attributes.defect_type, DefectType::Crack);
        assert_eq!(tuned.completion_tokens, count_tokens(&tuned.refined_text));
    }

    #[test]
    fn rust_on_fastener() {
        let lib = DefectLibrary::builtin();
        let tuned = tune_prompt(&prompt("rust on fastener"), &lib, &offline()).unwrap();
        // rust template: 3 inch, unspecified orientation, fastener surface phrase
        assert_eq!(
            tuned.refined_text,
            "A patch of rust, approximately 3 inches across, located on the fastener, \
with orange-brown oxide flaking at the center."
        );
        assert_eq!(tuned.attributes.component, "fastener");
        assert_eq!(tuned.attributes.orientation, Orientation::Unspecified);
    }

    #[test]
    fn user_attributes_override_template() {
        let out = offline().rewrite("longitudinal crack 5 mm on the sleeper, black");
        assert_eq!(
            out,
            "A longitudinal crack, approximately 5 mm long, located on the top face of the sleeper, \
with black discoloration."
        );
    }

    #[test]
    fn library_select_uses_fragment() {
        let lib = DefectLibrary::builtin();
        let req = ScenarioRequest::new(
            "l",
            Scenario::LibrarySelect {
                material_id: "freight_panel".into(),
                defect_id: "decay".into(),
            },
        );
        let tuned = tune_prompt(&req, &lib, &offline()).unwrap();
        assert_eq!(tuned.original, "decay on the freight panel");
        assert!(tuned.refined_text.starts_with("An area of surface decay"));
        assert_eq!(tuned.attributes.component, "freight panel");
    }

    #[test]
    fn inpaint_mask_region_is_verbalized() {
        let lib = DefectLibrary::builtin();
        let req = ScenarioRequest::new(
            "i",
            Scenario::ImageInpaint {
                image: Some(RgbaImage::new(90, 90)),
                mask: Some(Mask::from_fn(90, 90, |x, y| x < 20 && y < 20)),
                instruction: "add a squat".into(),
            },
        );
        let tuned = tune_prompt(&req, &lib, &offline()).unwrap();
        assert_eq!(tuned.original, "add a squat");
        assert!(tuned.refined_text.contains("in the top-left region"), "{}", tuned.refined_text);
        assert_eq!(tuned.attributes.location, BBox::from_region_name("top-left"));
    }

    struct Scripted {
        replies: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl TunerBackend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &str, _: &str) -> Result<Completion, BackendError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            let text = self.replies[i.min(self.replies.len() - 1)].to_owned();
            Ok(Completion {
                completion_tokens: count_tokens(&text),
                prompt_tokens: 1,
                text,
            })
        }
    }

    #[test]
    fn empty_completions_are_untunable() {
        let backend = Scripted {
            replies: vec![""],
            calls: AtomicUsize::new(0),
        };
        let err = tune_prompt(&prompt("crack on the rail"), &DefectLibrary::builtin(), &backend).unwrap_err();
        assert!(matches!(err, TuneError::UntunablePrompt { .. }));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn one_retry_recovers() {
        let backend = Scripted {
            replies: vec!["a crack", REFERENCE_TUNED],
            calls: AtomicUsize::new(0),
        };
        let tuned = tune_prompt(&prompt("crack on the rail"), &DefectLibrary::builtin(), &backend).unwrap();
        assert_eq!(tuned.refined_text, REFERENCE_TUNED);
        assert_eq!(tuned.prompt_tokens, 2);
    }

    #[test]
    fn no_defect_prompt_is_untunable_offline() {
        let err = tune_prompt(&prompt("a photo of a sunny beach"), &DefectLibrary::builtin(), &offline()).unwrap_err();
        assert!(matches!(err, TuneError::UntunablePrompt { .. }));
    }

    #[test]
    fn extract_reference_sentence() {
        let spec = extract_attributes(REFERENCE_TUNED).unwrap();
        assert_eq!(spec.defect_type, DefectType::Crack);
        assert_eq!(spec.orientation, Orientation::Transverse);
        assert_eq!(
            spec.size,
            Some(DefectSize {
                value: 2.0,
                unit: SizeUnit::Inch
            })
        );
        assert_eq!(spec.component, "rail head");
        assert_eq!(spec.color_notes.as_deref(), Some("slight rust discoloration around the edges"));
    }

    #[test]
    fn extract_terse_list() {
        let spec = extract_attributes("wear, 3 mm, longitudinal").unwrap();
        assert_eq!(spec.defect_type, DefectType::Wear);
        assert_eq!(
            spec.size,
            Some(DefectSize {
                value: 3.0,
                unit: SizeUnit::Mm
            })
        );
        assert_eq!(spec.orientation, Orientation::Longitudinal);
        assert_eq!(spec.location, None);
        assert_eq!(spec.color_notes, None);
    }

    #[test]
    fn extract_without_defect() {
        assert!(matches!(
            extract_attributes("a photo of a sunny beach"),
            Err(TuneError::NoDefectFound)
        ));
        assert!(matches!(extract_attributes("   "), Err(TuneError::EmptyText)));
    }

    #[test]
    fn centimeters_become_mm() {
        let spec = extract_attributes("a 2.5 cm crack").unwrap();
        assert_eq!(
            spec.size,
            Some(DefectSize {
                value: 25.0,
                unit: SizeUnit::Mm
            })
        );
    }
}

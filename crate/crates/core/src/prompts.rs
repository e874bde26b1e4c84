//! Prompt templates and their rendering into multimodal chat messages.
//!
//! The template texts live in `prompts/*.txt` next to the crate manifest and
//! are compiled in. Each contains `<GROUNDIMAGE>` plus either `<AERIALIMAGE>`
//! (pointwise) or `<AERIALIMAGE1>` and `<AERIALIMAGE2>` (pairwise); rendering
//! splits the text at those markers and puts an image part in each slot.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{AerialCandidate, GroundQuery, StrategyId};

const DIRECT: &str = include_str!("../prompts/direct.txt");
const LIKERT: &str = include_str!("../prompts/likert.txt");
const YESNO: &str = include_str!("../prompts/yesno.txt");
const REASON_YESNO: &str = include_str!("../prompts/reason_yesno.txt");
const PAIRWISE: &str = include_str!("../prompts/pairwise.txt");

/// Second-turn instruction for the reasoning strategy; asks for the final
/// one-word verdict after the model has produced its reasoning.
pub const REASON_FOLLOWUP: &str =
    "Based on your reasoning above, does the satellite image match the ground-level panorama? Answer ONLY with the single word 'Yes' or 'No'.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("strategy '{0}' is not a pointwise strategy")]
    NotPointwise(StrategyId),
    #[error("pairwise comparison of candidate '{0}' with itself")]
    SameCandidate(String),
    #[error("unresolvable image reference '{reference}': {reason}")]
    Unresolvable { reference: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placeholder {
    Ground,
    Aerial,
    Aerial1,
    Aerial2,
}

impl Placeholder {
    pub fn marker(self) -> &'static str {
        match self {
            Placeholder::Ground => "<GROUNDIMAGE>",
            Placeholder::Aerial => "<AERIALIMAGE>",
            Placeholder::Aerial1 => "<AERIALIMAGE1>",
            Placeholder::Aerial2 => "<AERIALIMAGE2>",
        }
    }
}

// Longest markers first so "<AERIALIMAGE1>" is never read as "<AERIALIMAGE>".
const MARKERS: [Placeholder; 4] = [
    Placeholder::Aerial1,
    Placeholder::Aerial2,
    Placeholder::Ground,
    Placeholder::Aerial,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Slot(Placeholder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub strategy: StrategyId,
    pub text: &'static str,
}

impl PromptTemplate {
    pub fn for_strategy(strategy: StrategyId) -> Self {
        let text = match strategy {
            StrategyId::Direct => DIRECT,
            StrategyId::Likert => LIKERT,
            StrategyId::Yesno => YESNO,
            StrategyId::ReasonYesno => REASON_YESNO,
            StrategyId::Pairwise => PAIRWISE,
        };
        PromptTemplate { strategy, text }
    }

    /// Splits the text at image markers, in template order.
    pub fn segments(&self) -> Vec<Segment<'static>> {
        let mut out = Vec::new();
        let mut rest = self.text;
        loop {
            let next = MARKERS
                .iter()
                .filter_map(|p| rest.find(p.marker()).map(|at| (at, *p)))
                .min_by_key(|(at, p)| (*at, std::cmp::Reverse(p.marker().len())));
            match next {
                Some((at, p)) => {
                    if at > 0 {
                        out.push(Segment::Text(&rest[..at]));
                    }
                    out.push(Segment::Slot(p));
                    rest = &rest[at + p.marker().len()..];
                }
                None => {
                    if !rest.is_empty() {
                        out.push(Segment::Text(rest));
                    }
                    return out;
                }
            }
        }
    }

    pub fn slots(&self) -> Vec<Placeholder> {
        self.segments()
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(p) => Some(p),
                Segment::Text(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Local file; bytes are read and inlined when the request is built.
    File(PathBuf),
    /// Remote `http(s)://` or inline `data:` URI, passed through untouched.
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImagePart {
    pub media_type: String,
    pub source: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessagePart {
    Text(String),
    Image(ImagePart),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalMessage {
    pub parts: Vec<MessagePart>,
}

impl MultimodalMessage {
    pub fn text(text: impl Into<String>) -> Self {
        MultimodalMessage {
            parts: vec![MessagePart::Text(text.into())],
        }
    }

    /// Concatenation of the text parts, i.e. the prompt with images elided.
    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                MessagePart::Text(t) => Some(t.as_str()),
                MessagePart::Image(_) => None,
            })
            .collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.parts.iter().filter_map(|p| match p {
            MessagePart::Image(i) => Some(i),
            MessagePart::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub message: MultimodalMessage,
}

/// An ordered exchange sent to the model in one request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<ChatTurn>,
}

impl Conversation {
    pub fn single(message: MultimodalMessage) -> Self {
        Conversation {
            turns: vec![ChatTurn {
                role: Role::User,
                message,
            }],
        }
    }

    pub fn push(&mut self, role: Role, message: MultimodalMessage) {
        self.turns.push(ChatTurn { role, message });
    }
}

impl From<MultimodalMessage> for Conversation {
    fn from(m: MultimodalMessage) -> Self {
        Conversation::single(m)
    }
}

/// Turns image references from candidate files into message image parts.
///
/// Relative paths are joined to `root`; `file://` prefixes are stripped;
/// `http(s)://` and `data:` URIs pass through.
#[derive(Debug, Clone, Default)]
pub struct ImageResolver {
    root: Option<PathBuf>,
}

impl ImageResolver {
    pub fn new(root: Option<PathBuf>) -> Self {
        ImageResolver { root }
    }

    pub fn resolve(&self, reference: &str) -> Result<ImagePart, PromptError> {
        let fail = |reason: &str| PromptError::Unresolvable {
            reference: reference.to_string(),
            reason: reason.to_string(),
        };
        if reference.is_empty() {
            return Err(fail("empty reference"));
        }
        if let Some(rest) = reference.strip_prefix("data:") {
            let media_type = rest
                .split([';', ','])
                .next()
                .filter(|m| m.starts_with("image/"))
                .ok_or_else(|| fail("data URI without an image media type"))?;
            return Ok(ImagePart {
                media_type: media_type.to_string(),
                source: ImageSource::Url(reference.to_string()),
            });
        }
        if reference.starts_with("http://") || reference.starts_with("https://") {
            let media_type = media_type_for(Path::new(reference.split('?').next().unwrap_or("")))
                .unwrap_or("image/jpeg");
            return Ok(ImagePart {
                media_type: media_type.to_string(),
                source: ImageSource::Url(reference.to_string()),
            });
        }
        let raw = Path::new(reference.strip_prefix("file://").unwrap_or(reference));
        let path = match &self.root {
            Some(root) if raw.is_relative() => root.join(raw),
            _ => raw.to_path_buf(),
        };
        let media_type = media_type_for(&path).ok_or_else(|| fail("unsupported image extension"))?;
        if !path.is_file() {
            return Err(fail(&format!("no such file {}", path.display())));
        }
        Ok(ImagePart {
            media_type: media_type.to_string(),
            source: ImageSource::File(path),
        })
    }
}

fn media_type_for(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    Some(match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "png" => "image/png",
        "webp" => "image/webp",
        "gif" => "image/gif",
        "bmp" => "image/bmp",
        "tif" | "tiff" => "image/tiff",
        _ => return None,
    })
}

fn fill(
    template: PromptTemplate,
    mut image_for: impl FnMut(Placeholder) -> ImagePart,
) -> MultimodalMessage {
    let parts = template
        .segments()
        .into_iter()
        .map(|seg| match seg {
            Segment::Text(t) => MessagePart::Text(t.to_string()),
            Segment::Slot(p) => MessagePart::Image(image_for(p)),
        })
        .collect();
    MultimodalMessage { parts }
}

pub fn render_pointwise(
    strategy: StrategyId,
    query: &GroundQuery,
    candidate: &AerialCandidate,
    resolver: &ImageResolver,
) -> Result<MultimodalMessage, PromptError> {
    if !strategy.is_pointwise() {
        return Err(PromptError::NotPointwise(strategy));
    }
    let ground = resolver.resolve(&query.image_ref)?;
    let aerial = resolver.resolve(&candidate.image_ref)?;
    Ok(fill(PromptTemplate::for_strategy(strategy), |p| match p {
        Placeholder::Ground => ground.clone(),
        _ => aerial.clone(),
    }))
}

/// Renders the comparison prompt with `first` in slot 1 and `second` in slot 2.
pub fn render_pairwise(
    query: &GroundQuery,
    first: &AerialCandidate,
    second: &AerialCandidate,
    resolver: &ImageResolver,
) -> Result<MultimodalMessage, PromptError> {
    if first.id == second.id {
        return Err(PromptError::SameCandidate(first.id.clone()));
    }
    let ground = resolver.resolve(&query.image_ref)?;
    let one = resolver.resolve(&first.image_ref)?;
    let two = resolver.resolve(&second.image_ref)?;
    Ok(fill(PromptTemplate::for_strategy(StrategyId::Pairwise), |p| match p {
        Placeholder::Ground => ground.clone(),
        Placeholder::Aerial1 | Placeholder::Aerial => one.clone(),
        Placeholder::Aerial2 => two.clone(),
    }))
}

//! Tool library: format-encoding tool names, parameter specs and loading.
//!
//! A tool name spells out its input formats and its output format, e.g.
//! `text_txt_to_video_mp4` or `image_png_audio_mp3_to_video_mp4`. The library
//! file is a JSON document `{"version", "tools": [...]}`; unknown fields are
//! rejected so that schema drift surfaces at load time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest;
use crate::modality::{Extension, Format, Modality};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("malformed tool name `{name}`: {reason}")]
    MalformedName { name: String, reason: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("duplicate tool `{0}`")]
    DuplicateTool(String),
    #[error("tool `{name}` declares output {declared} but its name says {expected}")]
    InconsistentName {
        name: String,
        declared: String,
        expected: String,
    },
    #[error("tool `{tool}` has a bad parameter `{param}`: {reason}")]
    BadParam {
        tool: String,
        param: String,
        reason: String,
    },
}

/// Structured form of a tool name.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ToolName {
    inputs: Vec<Format>,
    output: Format,
}

impl ToolName {
    pub fn new(inputs: Vec<Format>, output: Format) -> Option<Self> {
        (!inputs.is_empty()).then_some(Self { inputs, output })
    }

    pub fn inputs(&self) -> &[Format] {
        &self.inputs
    }

    pub fn output(&self) -> Format {
        self.output
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, input) in self.inputs.iter().enumerate() {
            if i > 0 {
                f.write_str("_")?;
            }
            write!(f, "{input}")?;
        }
        write!(f, "_to_{}", self.output)
    }
}

impl FromStr for ToolName {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tool_name(s)
    }
}

fn malformed(name: &str, reason: impl Into<String>) -> RegistryError {
    RegistryError::MalformedName {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn parse_segments(raw: &str, tokens: &[&str]) -> Result<Vec<Format>, RegistryError> {
    if tokens.is_empty() || !tokens.len().is_multiple_of(2) {
        return Err(malformed(raw, "odd or empty segment count"));
    }
    tokens
        .chunks(2)
        .map(|pair| {
            let modality = Modality::from_token(pair[0])
                .ok_or_else(|| malformed(raw, format!("unknown modality `{}`", pair[0])))?;
            let extension = Extension::from_token(pair[1])
                .ok_or_else(|| malformed(raw, format!("unknown extension `{}`", pair[1])))?;
            Format::new(modality, extension).ok_or_else(|| {
                malformed(
                    raw,
                    format!("extension `{extension}` does not belong to `{modality}`"),
                )
            })
        })
        .collect()
}

/// Parses a tool name. Input is trimmed and lower-cased before parsing.
pub fn parse_tool_name(raw: &str) -> Result<ToolName, RegistryError> {
    let normalized = raw.trim().to_ascii_lowercase();
    if normalized.is_empty() {
        return Err(malformed(raw, "empty name"));
    }
    let tokens: Vec<&str> = normalized.split('_').collect();
    let separators: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| (*t == "to").then_some(i))
        .collect();
    let sep = match separators.as_slice() {
        [] => return Err(malformed(raw, "missing `_to_` separator")),
        [one] => *one,
        _ => return Err(malformed(raw, "more than one `_to_` separator")),
    };
    let inputs = parse_segments(raw, &tokens[..sep])?;
    let output = parse_segments(raw, &tokens[sep + 1..])?;
    if output.len() != 1 {
        return Err(malformed(raw, "exactly one output segment expected"));
    }
    Ok(ToolName {
        inputs,
        output: output[0],
    })
}

/// What a parameter accepts: inline text or a media file of some modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Expects {
    Literal,
    Media(Modality),
}

impl Expects {
    pub fn token(self) -> &'static str {
        match self {
            Expects::Literal => "literal",
            Expects::Media(m) => m.token(),
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        if token == "literal" {
            Some(Expects::Literal)
        } else {
            Modality::from_token(token).map(Expects::Media)
        }
    }

    pub fn extension(self) -> Option<Extension> {
        match self {
            Expects::Literal => None,
            Expects::Media(m) => Some(m.canonical_extension()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub description: String,
    pub expects: Expects,
    pub required: bool,
    pub repeatable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolSpec {
    pub name: ToolName,
    pub model_name: String,
    pub params: Vec<ParamSpec>,
    pub description: String,
    pub output: Format,
}

impl ToolSpec {
    pub fn canonical_name(&self) -> String {
        self.name.render()
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn media_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params
            .iter()
            .filter(|p| matches!(p.expects, Expects::Media(_)))
    }

    /// True when the tool consumes a video and an mp3 track and emits a video.
    pub fn merges_audio_into_video(&self) -> bool {
        self.output.extension() == Extension::Mp4
            && self
                .media_params()
                .any(|p| p.expects.extension() == Some(Extension::Mp3))
    }
}

/// An immutable, validated set of tools keyed by canonical name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolLibrary {
    version: String,
    tools: BTreeMap<String, ToolSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLibrary {
    version: String,
    tools: Vec<RawTool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTool {
    tool_name: String,
    model_name: String,
    required_parameters: Vec<RawParam>,
    description: String,
    output: RawFormat,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    name: String,
    description: String,
    expects: String,
    required: bool,
    repeatable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFormat {
    modality: String,
    extension: String,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn is_model_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '/' | ':'))
}

fn audible_key(m: Modality) -> Modality {
    if m.is_audible() {
        Modality::Audio
    } else {
        m
    }
}

fn build_tool(raw: RawTool) -> Result<ToolSpec, RegistryError> {
    let name = parse_tool_name(&raw.tool_name)?;
    let tool = name.render();
    if !is_model_name(&raw.model_name) {
        return Err(RegistryError::SchemaError(format!(
            "tool `{tool}` has an invalid model_name `{}`",
            raw.model_name
        )));
    }
    if raw.description.trim().is_empty() {
        return Err(RegistryError::SchemaError(format!(
            "tool `{tool}` has an empty description"
        )));
    }

    let modality = Modality::from_token(&raw.output.modality).ok_or_else(|| {
        RegistryError::SchemaError(format!(
            "tool `{tool}` output has unknown modality `{}`",
            raw.output.modality
        ))
    })?;
    let extension = Extension::from_token(&raw.output.extension).ok_or_else(|| {
        RegistryError::SchemaError(format!(
            "tool `{tool}` output has unknown extension `{}`",
            raw.output.extension
        ))
    })?;
    let inconsistent = || RegistryError::InconsistentName {
        name: tool.clone(),
        declared: format!("{}_{}", raw.output.modality, raw.output.extension),
        expected: name.output().to_string(),
    };
    let output = Format::new(modality, extension).ok_or_else(inconsistent)?;
    if output != name.output() {
        return Err(inconsistent());
    }

    let mut seen = BTreeSet::new();
    let mut params = Vec::with_capacity(raw.required_parameters.len());
    for p in raw.required_parameters {
        let bad = |reason: &str| RegistryError::BadParam {
            tool: tool.clone(),
            param: p.name.clone(),
            reason: reason.to_string(),
        };
        if !is_identifier(&p.name) {
            return Err(bad("name is not an identifier"));
        }
        if !seen.insert(p.name.clone()) {
            return Err(bad("duplicate parameter name"));
        }
        if p.description.trim().is_empty() {
            return Err(bad("empty description"));
        }
        let expects = Expects::from_token(&p.expects).ok_or_else(|| bad("unknown `expects` token"))?;
        params.push(ParamSpec {
            name: p.name,
            description: p.description,
            expects,
            required: p.required,
            repeatable: p.repeatable,
        });
    }

    // Media params must be covered by the name's inputs as a multiset, with
    // audio and speech sharing one bucket.
    let mut available: BTreeMap<Modality, usize> = BTreeMap::new();
    for input in name.inputs() {
        *available.entry(audible_key(input.modality())).or_default() += 1;
    }
    for p in &params {
        if let Expects::Media(m) = p.expects {
            let slot = available.entry(audible_key(m)).or_default();
            if *slot == 0 {
                return Err(RegistryError::BadParam {
                    tool: tool.clone(),
                    param: p.name.clone(),
                    reason: format!("expects {m} but the tool name does not list it as an input"),
                });
            }
            *slot -= 1;
        }
    }

    Ok(ToolSpec {
        name,
        model_name: raw.model_name,
        params,
        description: raw.description,
        output,
    })
}

/// Loads and validates a library document.
pub fn load_library(document: &str) -> Result<ToolLibrary, RegistryError> {
    let raw: RawLibrary =
        serde_json::from_str(document).map_err(|e| RegistryError::SchemaError(e.to_string()))?;
    ToolLibrary::from_raw(raw)
}

impl ToolLibrary {
    fn from_raw(raw: RawLibrary) -> Result<Self, RegistryError> {
        let mut tools = BTreeMap::new();
        for raw_tool in raw.tools {
            let spec = build_tool(raw_tool)?;
            let key = spec.canonical_name();
            if tools.contains_key(&key) {
                return Err(RegistryError::DuplicateTool(key));
            }
            tools.insert(key, spec);
        }
        Ok(Self {
            version: raw.version,
            tools,
        })
    }

    pub fn from_value(value: Value) -> Result<Self, RegistryError> {
        let raw: RawLibrary =
            serde_json::from_value(value).map_err(|e| RegistryError::SchemaError(e.to_string()))?;
        Self::from_raw(raw)
    }

    /// The library shipped with the crate; covers all eighteen task types.
    pub fn builtin() -> Self {
        load_library(BUILTIN_LIBRARY).expect("builtin library is valid")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    /// Tools whose name lists exactly `inputs` (in order) and `output`.
    pub fn find(&self, inputs: &[Extension], output: Extension) -> Option<&ToolSpec> {
        self.tools.values().find(|t| {
            t.output.extension() == output
                && t.name.inputs().iter().map(|f| f.extension()).eq(inputs.iter().copied())
        })
    }

    /// Tool used to turn audio tracks into text for scoring.
    pub fn transcription_tool(&self) -> Option<&ToolSpec> {
        let single_mp3_to_text = |t: &&ToolSpec| {
            t.output.extension() == Extension::Txt
                && t.name.inputs().len() == 1
                && t.name.inputs()[0].extension() == Extension::Mp3
        };
        self.tools
            .values()
            .filter(single_mp3_to_text)
            .find(|t| t.name.inputs()[0].modality() == Modality::Audio)
            .or_else(|| self.tools.values().find(single_mp3_to_text))
    }

    pub fn to_document(&self) -> Value {
        let raw = RawLibrary {
            version: self.version.clone(),
            tools: self
                .tools
                .values()
                .map(|t| RawTool {
                    tool_name: t.canonical_name(),
                    model_name: t.model_name.clone(),
                    required_parameters: t
                        .params
                        .iter()
                        .map(|p| RawParam {
                            name: p.name.clone(),
                            description: p.description.clone(),
                            expects: p.expects.token().to_string(),
                            required: p.required,
                            repeatable: p.repeatable,
                        })
                        .collect(),
                    description: t.description.clone(),
                    output: RawFormat {
                        modality: t.output.modality().token().to_string(),
                        extension: t.output.extension().as_str().to_string(),
                    },
                })
                .collect(),
        };
        serde_json::to_value(raw).expect("library serializes")
    }

    /// Hex SHA-256 of the canonical library document.
    pub fn digest(&self) -> String {
        digest::sha256_hex(self.to_document().to_string().as_bytes())
    }

    /// Plain-text listing handed to critics.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for t in self.tools.values() {
            out.push_str(&format!("{} [{}]: {}\n", t.canonical_name(), t.model_name, t.description));
            for p in &t.params {
                out.push_str(&format!(
                    "  - {} ({}{}{}): {}\n",
                    p.name,
                    p.expects.token(),
                    if p.required { ", required" } else { "" },
                    if p.repeatable { ", repeatable" } else { "" },
                    p.description
                ));
            }
        }
        out
    }
}

pub const BUILTIN_LIBRARY: &str = include_str!("../fixtures/library.json");

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fmt(m: Modality) -> Format {
        Format::of(m)
    }

    #[test]
    fn parses_single_input_name() {
        let name = parse_tool_name("text_txt_to_video_mp4").unwrap();
        assert_eq!(name.inputs(), &[fmt(Modality::Text)]);
        assert_eq!(name.output(), fmt(Modality::Video));
    }

    #[test]
    fn parses_identity_pair() {
        let name = parse_tool_name("image_png_to_image_png").unwrap();
        assert_eq!(name.inputs(), &[fmt(Modality::Image)]);
        assert_eq!(name.output(), fmt(Modality::Image));
    }

    #[test]
    fn multi_input_round_trip() {
        let built = ToolName::new(vec![fmt(Modality::Image), fmt(Modality::Audio)], fmt(Modality::Video)).unwrap();
        let rendered = built.render();
        assert_eq!(rendered, "image_png_audio_mp3_to_video_mp4");
        assert_eq!(parse_tool_name(&rendered).unwrap(), built);
    }

    #[test]
    fn normalizes_case_and_whitespace() {
        let name = parse_tool_name("  Text_TXT_to_Video_MP4 ").unwrap();
        assert_eq!(name.render(), "text_txt_to_video_mp4");
    }

    #[test]
    fn rejects_malformed_names() {
        for bad in [
            "",
            "text_txt_video_mp4",
            "text_to_video_mp4",
            "text_txt_to_video",
            "sound_mp3_to_text_txt",
            "text_mp4_to_video_mp4",
            "text_txt_to_video_mp4_audio_mp3",
            "text_txt_to_to_video_mp4",
            "_to_video_mp4",
        ] {
            assert!(
                matches!(parse_tool_name(bad), Err(RegistryError::MalformedName { .. })),
                "{bad:?} should be rejected"
            );
        }
    }

    fn tool(name: &str, output: (&str, &str)) -> Value {
        json!({
            "tool_name": name,
            "model_name": "model-a",
            "required_parameters": [
                {"name": "prompt", "description": "what to render", "expects": "literal", "required": true, "repeatable": false}
            ],
            "description": "renders things",
            "output": {"modality": output.0, "extension": output.1}
        })
    }

    #[test]
    fn loads_single_tool() {
        let doc = json!({"version": "1", "tools": [tool("text_txt_to_video_mp4", ("video", "mp4"))]});
        let lib = load_library(&doc.to_string()).unwrap();
        assert_eq!(lib.len(), 1);
        let spec = lib.get("text_txt_to_video_mp4").unwrap();
        assert_eq!(lib.get(&spec.name.render()), Some(spec));
    }

    #[test]
    fn rejects_duplicates() {
        let t = tool("text_txt_to_video_mp4", ("video", "mp4"));
        let doc = json!({"version": "1", "tools": [t.clone(), t]});
        assert!(matches!(
            load_library(&doc.to_string()),
            Err(RegistryError::DuplicateTool(_))
        ));
    }

    #[test]
    fn rejects_inconsistent_output() {
        let doc = json!({"version": "1", "tools": [tool("text_txt_to_video_mp4", ("text", "txt"))]});
        assert!(matches!(
            load_library(&doc.to_string()),
            Err(RegistryError::InconsistentName { .. })
        ));
    }

    #[test]
    fn rejects_unknown_top_level_field() {
        let doc = json!({"version": "1", "tools": [], "extra": 1});
        assert!(matches!(
            load_library(&doc.to_string()),
            Err(RegistryError::SchemaError(_))
        ));
    }

    #[test]
    fn media_param_must_be_listed_in_name() {
        let mut t = tool("text_txt_to_video_mp4", ("video", "mp4"));
        t["required_parameters"][0]["expects"] = json!("image");
        let doc = json!({"version": "1", "tools": [t]});
        assert!(matches!(
            load_library(&doc.to_string()),
            Err(RegistryError::BadParam { .. })
        ));
    }

    #[test]
    fn speech_param_fits_audio_input() {
        let mut t = tool("audio_mp3_to_text_txt", ("text", "txt"));
        t["required_parameters"][0]["expects"] = json!("speech");
        let doc = json!({"version": "1", "tools": [t]});
        assert!(load_library(&doc.to_string()).is_ok());
    }

    #[test]
    fn builtin_library_loads_and_is_idempotent() {
        let lib = ToolLibrary::builtin();
        assert!(lib.len() >= 20);
        let again = ToolLibrary::from_value(lib.to_document()).unwrap();
        assert_eq!(lib, again);
        assert_eq!(lib.digest(), again.digest());
        assert!(lib.transcription_tool().is_some());
    }
}

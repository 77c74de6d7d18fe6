//! Media modalities and their fixed file formats.
//!
//! Every modality owns exactly one canonical extension. The inverse mapping is
//! single-valued except for `mp3`, which is shared by audio and speech and
//! resolves to [`Modality::Audio`] unless a parameter spec says otherwise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
    Audio,
    Speech,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Image,
        Modality::Video,
        Modality::Audio,
        Modality::Speech,
        Modality::Text,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.token() == token)
    }

    pub fn canonical_extension(self) -> Extension {
        match self {
            Modality::Image => Extension::Png,
            Modality::Video => Extension::Mp4,
            Modality::Audio | Modality::Speech => Extension::Mp3,
            Modality::Text => Extension::Txt,
        }
    }

    /// Audio and speech are carried in the same container and are
    /// interchangeable wherever only the file format matters.
    pub fn is_audible(self) -> bool {
        matches!(self, Modality::Audio | Modality::Speech)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    Png,
    Mp4,
    Mp3,
    Txt,
}

impl Extension {
    pub const ALL: [Extension; 4] = [Extension::Png, Extension::Mp4, Extension::Mp3, Extension::Txt];

    pub fn as_str(self) -> &'static str {
        match self {
            Extension::Png => "png",
            Extension::Mp4 => "mp4",
            Extension::Mp3 => "mp3",
            Extension::Txt => "txt",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == token)
    }

    /// Modality implied by the extension alone (`mp3` resolves to audio).
    pub fn default_modality(self) -> Modality {
        match self {
            Extension::Png => Modality::Image,
            Extension::Mp4 => Modality::Video,
            Extension::Mp3 => Modality::Audio,
            Extension::Txt => Modality::Text,
        }
    }
}

impl fmt::Display for Extension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Extension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Extension::from_token(s).ok_or_else(|| format!("unknown extension `{s}`"))
    }
}

/// A `(modality, extension)` pair that respects the canonical mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Format {
    modality: Modality,
    extension: Extension,
}

impl Format {
    pub fn new(modality: Modality, extension: Extension) -> Option<Self> {
        (modality.canonical_extension() == extension).then_some(Self { modality, extension })
    }

    pub fn of(modality: Modality) -> Self {
        Self {
            modality,
            extension: modality.canonical_extension(),
        }
    }

    pub fn modality(self) -> Modality {
        self.modality
    }

    pub fn extension(self) -> Extension {
        self.extension
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.modality, self.extension)
    }
}

pub fn canonical_extension(modality: Modality) -> Extension {
    modality.canonical_extension()
}

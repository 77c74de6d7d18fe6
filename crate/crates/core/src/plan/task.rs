//! The eighteen input→output task types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::modality::Modality;

/// Input combination of a task: a pair of modalities, or "multiple" of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskType {
    AvA,
    AvT,
    AvV,
    IaT,
    IaV,
    IvA,
    IvT,
    IvV,
    MaI,
    MaT,
    MaV,
    MiA,
    MiT,
    MiV,
    MvA,
    MvI,
    MvT,
    MvV,
}

impl TaskType {
    /// All task types in table column order.
    pub const ALL: [TaskType; 18] = [
        TaskType::AvA,
        TaskType::AvT,
        TaskType::AvV,
        TaskType::IaT,
        TaskType::IaV,
        TaskType::IvA,
        TaskType::IvT,
        TaskType::IvV,
        TaskType::MaI,
        TaskType::MaT,
        TaskType::MaV,
        TaskType::MiA,
        TaskType::MiT,
        TaskType::MiV,
        TaskType::MvA,
        TaskType::MvI,
        TaskType::MvT,
        TaskType::MvV,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TaskType::AvA => "AV-A",
            TaskType::AvT => "AV-T",
            TaskType::AvV => "AV-V",
            TaskType::IaT => "IA-T",
            TaskType::IaV => "IA-V",
            TaskType::IvA => "IV-A",
            TaskType::IvT => "IV-T",
            TaskType::IvV => "IV-V",
            TaskType::MaI => "MA-I",
            TaskType::MaT => "MA-T",
            TaskType::MaV => "MA-V",
            TaskType::MiA => "MI-A",
            TaskType::MiT => "MI-T",
            TaskType::MiV => "MI-V",
            TaskType::MvA => "MV-A",
            TaskType::MvI => "MV-I",
            TaskType::MvT => "MV-T",
            TaskType::MvV => "MV-V",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    /// Minimal input multiset. "Multiple" tasks take two or more of one modality.
    pub fn inputs(self) -> [Modality; 2] {
        use Modality::*;
        match self.code().as_bytes()[..2] {
            [b'A', b'V'] => [Audio, Video],
            [b'I', b'A'] => [Image, Audio],
            [b'I', b'V'] => [Image, Video],
            [b'M', b'A'] => [Audio, Audio],
            [b'M', b'I'] => [Image, Image],
            [b'M', b'V'] => [Video, Video],
            _ => unreachable!("task codes are fixed"),
        }
    }

    pub fn is_multiple(self) -> bool {
        self.code().starts_with('M')
    }

    pub fn output(self) -> Modality {
        match self.code().as_bytes()[3] {
            b'A' => Modality::Audio,
            b'T' => Modality::Text,
            b'V' => Modality::Video,
            b'I' => Modality::Image,
            _ => unreachable!("task codes are fixed"),
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::from_code(s).ok_or_else(|| format!("unknown task type `{s}`"))
    }
}

impl Serialize for TaskType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for TaskType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        code.parse().map_err(serde::de::Error::custom)
    }
}

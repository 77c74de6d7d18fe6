//! Preference metrics over executed plan outputs.

mod stub;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::exec::{transcribe, ExecutionTrace, ToolBackend, TranscriptionError, Workspace};
use crate::modality::Modality;
use crate::plan::{embedded_audio_sources, ArtifactRef, Plan};
use crate::registry::ToolLibrary;

pub use stub::StubScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    TextAlignment,
    ImageNeed,
    ImageEmotion,
    ImageAesthetic,
    AudioNeed,
    AudioEmotion,
    VideoNeed,
    VideoEmotion,
    VideoAesthetic,
    AvAlignment,
}

impl Channel {
    pub const ALL: [Channel; 10] = [
        Channel::TextAlignment,
        Channel::ImageNeed,
        Channel::ImageEmotion,
        Channel::ImageAesthetic,
        Channel::AudioNeed,
        Channel::AudioEmotion,
        Channel::VideoNeed,
        Channel::VideoEmotion,
        Channel::VideoAesthetic,
        Channel::AvAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::TextAlignment => "text_alignment",
            Channel::ImageNeed => "image_need",
            Channel::ImageEmotion => "image_emotion",
            Channel::ImageAesthetic => "image_aesthetic",
            Channel::AudioNeed => "audio_need",
            Channel::AudioEmotion => "audio_emotion",
            Channel::VideoNeed => "video_need",
            Channel::VideoEmotion => "video_emotion",
            Channel::VideoAesthetic => "video_aesthetic",
            Channel::AvAlignment => "av_alignment",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Native score range. Judge-style channels share a 1 to 5 scale; the
    /// aesthetic channels keep the ranges of the models they stand in for.
    pub fn range(self) -> (f64, f64) {
        match self {
            Channel::ImageAesthetic => (0.0, 30.0),
            Channel::VideoAesthetic => (0.0, 3.0),
            _ => (1.0, 5.0),
        }
    }

    pub fn normalize(self, score: f64) -> f64 {
        let (lo, hi) = self.range();
        (score - lo) / (hi - lo)
    }

    pub fn is_aesthetic(self) -> bool {
        matches!(self, Channel::ImageAesthetic | Channel::VideoAesthetic)
    }

    pub fn is_audio(self) -> bool {
        matches!(self, Channel::AudioNeed | Channel::AudioEmotion)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channels that apply to one output of the given modality.
pub fn channels_for(modality: Modality, embedded_audio: bool) -> BTreeSet<Channel> {
    use Channel::*;
    let list: &[Channel] = match modality {
        Modality::Text => &[TextAlignment],
        Modality::Image => &[ImageNeed, ImageEmotion, ImageAesthetic],
        Modality::Audio | Modality::Speech => &[AudioNeed, AudioEmotion],
        Modality::Video if embedded_audio => &[VideoNeed, VideoEmotion, VideoAesthetic, AudioNeed, AudioEmotion, AvAlignment],
        Modality::Video => &[VideoNeed, VideoEmotion, VideoAesthetic],
    };
    list.iter().copied().collect()
}

pub fn applicable_channels(artifacts: &[ArtifactRef], has_embedded_audio: bool) -> BTreeSet<Channel> {
    artifacts
        .iter()
        .flat_map(|a| channels_for(a.modality(), has_embedded_audio))
        .collect()
}

/// What a scorer sees: the query plus the output's text and/or raw bytes.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub query: &'a str,
    pub text_context: Option<&'a str>,
    pub artifact: Option<&'a [u8]>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
}

pub trait Scorer: Send + Sync {
    fn score(&self, channel: Channel, context: &ScoreContext<'_>) -> Result<f64, ScorerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub plan_id: String,
    pub scores: BTreeMap<Channel, f64>,
    pub aggregate: f64,
    pub scale: BTreeMap<Channel, [f64; 2]>,
}

impl MetricReport {
    /// Builds a report, deriving the scale table and aggregate from `scores`.
    pub fn new(plan_id: impl Into<String>, scores: BTreeMap<Channel, f64>) -> Self {
        let scale = scores
            .keys()
            .map(|&c| {
                let (lo, hi) = c.range();
                (c, [lo, hi])
            })
            .collect();
        Self {
            plan_id: plan_id.into(),
            aggregate: aggregate(&scores),
            scores,
            scale,
        }
    }

    pub fn applicable(&self) -> BTreeSet<Channel> {
        self.scores.keys().copied().collect()
    }

    pub fn normalized(&self, channel: Channel) -> Option<f64> {
        self.scores.get(&channel).map(|&s| channel.normalize(s))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }

    pub fn from_value(value: Value) -> Result<Self, serde_json::Error> {
        serde_json::from_value(value)
    }
}

/// Unweighted mean of the min-max normalized scores; 0 when there are none.
pub fn aggregate(scores: &BTreeMap<Channel, f64>) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|(c, &s)| c.normalize(s)).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("plan did not execute successfully; enable failed-plan scoring to score it anyway")]
    NotScorable,
    #[error("execution produced no final artifacts")]
    NoArtifacts,
    #[error("final artifact `{0}` is missing from the workspace")]
    MissingArtifact(String),
    #[error("the tool library has no audio-to-text tool")]
    MissingTranscriptionTool,
    #[error(transparent)]
    Transcription(TranscriptionError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

impl From<TranscriptionError> for MetricsError {
    fn from(e: TranscriptionError) -> Self {
        match e {
            TranscriptionError::MissingTranscriptionTool => MetricsError::MissingTranscriptionTool,
            other => MetricsError::Transcription(other),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub score_failed_plans: bool,
}

/// Everything scoring needs from a finished run.
pub struct ExecutedPlan<'a> {
    pub plan: &'a Plan,
    pub trace: &'a ExecutionTrace,
    pub lib: &'a ToolLibrary,
    pub backend: &'a dyn ToolBackend,
    pub workspace: &'a Workspace,
}

fn clamp(channel: Channel, score: f64) -> f64 {
    let (lo, hi) = channel.range();
    if score.is_nan() {
        log::warn!("{channel}: scorer returned NaN, using {lo}");
        return lo;
    }
    if score < lo || score > hi {
        log::warn!("{channel}: score {score} outside [{lo}, {hi}], clamped");
    }
    score.clamp(lo, hi)
}

/// Scores every final artifact of a run. Audio is judged through its
/// transcript, obtained from the library's transcription tool.
pub fn score_output(
    run: &ExecutedPlan<'_>,
    scorer: &dyn Scorer,
    options: ScoreOptions,
) -> Result<MetricReport, MetricsError> {
    if !run.trace.overall_success && !options.score_failed_plans {
        return Err(MetricsError::NotScorable);
    }
    if run.trace.final_artifacts.is_empty() {
        return Err(MetricsError::NoArtifacts);
    }
    let query = run.plan.query.as_str();
    let plan_id = run.trace.plan_id.as_str();
    let mut collected: BTreeMap<Channel, Vec<f64>> = BTreeMap::new();
    let mut push = |channel: Channel, ctx: ScoreContext<'_>| -> Result<(), MetricsError> {
        let s = clamp(channel, scorer.score(channel, &ctx)?);
        collected.entry(channel).or_default().push(s);
        Ok(())
    };

    for filename in &run.trace.final_artifacts {
        let artifact = run
            .workspace
            .read(filename)
            .ok_or_else(|| MetricsError::MissingArtifact(filename.clone()))?;
        let bytes = &artifact.bytes[..];
        let ctx = |text: Option<&'static str>| ScoreContext {
            query,
            text_context: text,
            artifact: Some(bytes),
        };
        match artifact.modality {
            Modality::Text => {
                let text = String::from_utf8_lossy(bytes);
                push(
                    Channel::TextAlignment,
                    ScoreContext {
                        query,
                        text_context: Some(&text),
                        artifact: Some(bytes),
                    },
                )?;
            }
            Modality::Image => {
                for c in channels_for(Modality::Image, false) {
                    push(c, ctx(None))?;
                }
            }
            Modality::Audio | Modality::Speech => {
                let transcript = transcribe(run.lib, run.backend, plan_id, filename, artifact.bytes.clone())?;
                for c in channels_for(artifact.modality, false) {
                    push(
                        c,
                        ScoreContext {
                            query,
                            text_context: Some(&transcript),
                            artifact: Some(bytes),
                        },
                    )?;
                }
            }
            Modality::Video => {
                let sources = embedded_audio_sources(run.plan, filename);
                let mut transcripts = Vec::new();
                for source in &sources {
                    let track = run
                        .workspace
                        .read(source.filename())
                        .ok_or_else(|| MetricsError::MissingArtifact(source.filename().to_string()))?;
                    transcripts.push(transcribe(run.lib, run.backend, plan_id, source.filename(), track.bytes)?);
                }
                let transcript = transcripts.join("\n");
                for c in channels_for(Modality::Video, !sources.is_empty()) {
                    let context = match c {
                        Channel::AudioNeed | Channel::AudioEmotion => ScoreContext {
                            query,
                            text_context: Some(&transcript),
                            artifact: None,
                        },
                        Channel::AvAlignment => ScoreContext {
                            query,
                            text_context: Some(&transcript),
                            artifact: Some(bytes),
                        },
                        _ => ctx(None),
                    };
                    push(c, context)?;
                }
            }
        }
    }

    let scores = collected
        .into_iter()
        .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(MetricReport::new(plan_id, scores))
}

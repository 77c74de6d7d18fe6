use super::{Channel, ScoreContext, Scorer, ScorerError};
use crate::digest::{hash_parts, unit_interval};
use crate::media;
use crate::text;

/// Deterministic offline scorer. Judge-style channels measure keyword overlap
/// with the query; aesthetic channels hash the artifact bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubScorer {
    seed: u64,
}

impl StubScorer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

fn artifact_text(bytes: Option<&[u8]>) -> String {
    bytes
        .and_then(|b| media::sniff(b).and_then(|ext| media::describe(ext, b)))
        .unwrap_or_default()
}

impl Scorer for StubScorer {
    fn score(&self, channel: Channel, ctx: &ScoreContext<'_>) -> Result<f64, ScorerError> {
        let content = || {
            ctx.text_context
                .map(str::to_string)
                .unwrap_or_else(|| artifact_text(ctx.artifact))
        };
        let ratio = match channel {
            Channel::ImageAesthetic | Channel::VideoAesthetic => unit_interval(hash_parts(&[
                &self.seed.to_le_bytes(),
                channel.name().as_bytes(),
                ctx.artifact.unwrap_or_default(),
            ])),
            Channel::AvAlignment => recall_or_zero(ctx.text_context.unwrap_or(""), &artifact_text(ctx.artifact)),
            Channel::ImageEmotion | Channel::AudioEmotion | Channel::VideoEmotion => {
                text::jaccard(ctx.query, &content())
            }
            Channel::TextAlignment | Channel::ImageNeed | Channel::AudioNeed | Channel::VideoNeed => {
                text::recall(ctx.query, &content())
            }
        };
        let (lo, hi) = channel.range();
        Ok(lo + (hi - lo) * ratio)
    }
}

/// A silent or unreadable track aligns with nothing.
fn recall_or_zero(reference: &str, candidate: &str) -> f64 {
    if text::keywords(reference).is_empty() {
        0.0
    } else {
        text::recall(reference, candidate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Extension;

    fn ctx<'a>(query: &'a str, text: Option<&'a str>, artifact: Option<&'a [u8]>) -> ScoreContext<'a> {
        ScoreContext {
            query,
            text_context: text,
            artifact,
        }
    }

    #[test]
    fn overlap_extremes() {
        let s = StubScorer::new(0);
        let q = "sunset over the harbor";
        assert_eq!(s.score(Channel::TextAlignment, &ctx(q, Some(q), None)), Ok(5.0));
        assert_eq!(s.score(Channel::AudioEmotion, &ctx(q, Some(q), None)), Ok(5.0));
        assert_eq!(s.score(Channel::TextAlignment, &ctx(q, Some("quarterly revenue"), None)), Ok(1.0));
        assert_eq!(s.score(Channel::VideoEmotion, &ctx(q, Some("quarterly revenue"), None)), Ok(1.0));
    }

    #[test]
    fn reads_descriptor_from_artifact() {
        let s = StubScorer::new(0);
        let png = media::placeholder(Extension::Png, "sunset harbor");
        let score = s.score(Channel::ImageNeed, &ctx("sunset over the harbor", None, Some(&png))).unwrap();
        assert_eq!(score, 5.0);
    }

    #[test]
    fn aesthetic_is_a_function_of_bytes() {
        let s = StubScorer::new(3);
        let a = media::placeholder(Extension::Mp4, "x");
        let b = media::placeholder(Extension::Mp4, "y");
        let score = |bytes: &[u8]| s.score(Channel::VideoAesthetic, &ctx("q", None, Some(bytes))).unwrap();
        assert_eq!(score(&a), score(&a.clone()));
        assert_ne!(score(&a), score(&b));
        let (lo, hi) = Channel::VideoAesthetic.range();
        assert!((lo..=hi).contains(&score(&a)));
    }

    #[test]
    fn av_alignment() {
        let s = StubScorer::new(0);
        let video = media::placeholder(Extension::Mp4, "waves crashing beach");
        let aligned = s.score(Channel::AvAlignment, &ctx("q", Some("waves beach"), Some(&video))).unwrap();
        let off = s.score(Channel::AvAlignment, &ctx("q", Some("techno bass"), Some(&video))).unwrap();
        assert_eq!((aligned, off), (5.0, 1.0));
    }
}

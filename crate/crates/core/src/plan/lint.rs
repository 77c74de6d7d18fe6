//! Common-sense advisories for plans that already type-check.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ArtifactRef, Plan};
use crate::modality::{Extension, Modality};
use crate::registry::{Expects, ToolLibrary};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LintRule {
    VideoWithoutAudio,
    SpeechWithoutScript,
    NoFinalOutputForTask,
}

impl LintRule {
    pub fn id(self) -> &'static str {
        match self {
            LintRule::VideoWithoutAudio => "VideoWithoutAudio",
            LintRule::SpeechWithoutScript => "SpeechWithoutScript",
            LintRule::NoFinalOutputForTask => "NoFinalOutputForTask",
        }
    }
}

impl fmt::Display for LintRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advisory {
    pub rule: LintRule,
    pub step: Option<usize>,
    pub message: String,
}

impl fmt::Display for Advisory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(s) => write!(f, "{} step={} {}", self.rule, s, self.message),
            None => write!(f, "{} {}", self.rule, self.message),
        }
    }
}

/// The mp3 tracks that end up inside video `filename`, following merges and
/// video-to-video edits back through the plan. Materials carry no known track.
pub fn embedded_audio_sources(plan: &Plan, filename: &str) -> Vec<ArtifactRef> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    collect_audio(plan, filename, plan.steps.len(), &mut out, &mut seen);
    out
}

fn collect_audio(
    plan: &Plan,
    filename: &str,
    before: usize,
    out: &mut Vec<ArtifactRef>,
    seen: &mut BTreeSet<String>,
) {
    let Some(producer) = plan.steps[..before]
        .iter()
        .rposition(|s| s.output.filename() == filename)
    else {
        return;
    };
    let step = &plan.steps[producer];
    if step.output.extension() != Extension::Mp4 {
        return;
    }
    for r in step.references() {
        match r.extension() {
            Extension::Mp3 => {
                if seen.insert(r.filename().to_string()) {
                    out.push(r.clone());
                }
            }
            Extension::Mp4 => collect_audio(plan, r.filename(), producer, out, seen),
            _ => {}
        }
    }
}

pub fn has_embedded_audio(plan: &Plan, filename: &str) -> bool {
    !embedded_audio_sources(plan, filename).is_empty()
}

/// Whether text reaching a step can be traced back to the query or to a
/// user-provided material.
fn grounded(plan: &Plan, filename: &str, before: usize) -> bool {
    if let Some(producer) = plan.steps[..before]
        .iter()
        .rposition(|s| s.output.filename() == filename)
    {
        let step = &plan.steps[producer];
        step.literals().any(|l| text::shares_keyword(&plan.query, l))
            || step
                .references()
                .any(|r| grounded(plan, r.filename(), producer))
    } else {
        plan.is_material(filename)
    }
}

/// Returns advisories for video outputs lacking a soundtrack, speech synthesized
/// from ungrounded text, and plans that never produce the task's output type.
pub fn lint_plan(plan: &Plan, lib: &ToolLibrary) -> Vec<Advisory> {
    let mut out = Vec::new();

    for (i, step) in plan.steps.iter().enumerate() {
        let Some(spec) = lib.get(&step.tool) else { continue };
        if spec.output.modality() == Modality::Speech {
            let script_params: Vec<_> = {
                let files: Vec<_> = spec
                    .params
                    .iter()
                    .filter(|p| p.expects == Expects::Media(Modality::Text))
                    .collect();
                if files.is_empty() {
                    spec.params.iter().filter(|p| p.expects == Expects::Literal).collect()
                } else {
                    files
                }
            };
            let is_grounded = script_params.iter().any(|p| {
                step.args.get(&p.name).is_some_and(|b| {
                    b.items().iter().any(|arg| match arg {
                        super::StepArgument::Literal(l) => text::shares_keyword(&plan.query, l),
                        super::StepArgument::Reference(r) => grounded(plan, r.filename(), i),
                    })
                })
            });
            if !is_grounded {
                out.push(Advisory {
                    rule: LintRule::SpeechWithoutScript,
                    step: Some(i),
                    message: format!(
                        "speech for `{}` is synthesized from text not derived from the query or materials",
                        step.output
                    ),
                });
            }
        }
    }

    for final_output in plan.final_outputs() {
        if final_output.extension() == Extension::Mp4 && !has_embedded_audio(plan, final_output.filename()) {
            out.push(Advisory {
                rule: LintRule::VideoWithoutAudio,
                step: plan.producer(final_output.filename()),
                message: format!("final video `{final_output}` has no music, sound or voiceover track"),
            });
        }
    }

    let wanted = plan.task_type.output().canonical_extension();
    if !plan.steps.iter().any(|s| s.output.extension() == wanted) {
        out.push(Advisory {
            rule: LintRule::NoFinalOutputForTask,
            step: None,
            message: format!(
                "task {} expects a .{wanted} output but no step produces one",
                plan.task_type
            ),
        });
    }

    out.sort_by_key(|a| (a.step.unwrap_or(usize::MAX), a.rule));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::parse_plan;
    use serde_json::json;

    fn rules(doc: serde_json::Value) -> Vec<LintRule> {
        let plan = parse_plan(&doc).unwrap();
        lint_plan(&plan, &ToolLibrary::builtin()).into_iter().map(|a| a.rule).collect()
    }

    #[test]
    fn silent_slideshow() {
        let r = rules(json!({
            "query": "wedding photos slideshow", "task_type": "MI-V", "materials": ["a.png", "b.png"],
            "steps": [{"index": 0, "tool": "image_png_to_video_mp4", "args": {"images": [{"ref": "a.png"}, {"ref": "b.png"}]}, "output": "show.mp4"}]
        }));
        assert_eq!(r, vec![LintRule::VideoWithoutAudio]);
    }

    #[test]
    fn compliant_plan_with_merged_audio() {
        let r = rules(json!({
            "query": "wedding photos slideshow", "task_type": "MI-V", "materials": ["a.png", "b.png"],
            "steps": [
                {"index": 0, "tool": "image_png_to_video_mp4", "args": {"images": [{"ref": "a.png"}, {"ref": "b.png"}]}, "output": "show.mp4"},
                {"index": 1, "tool": "text_txt_to_audio_mp3", "args": {"prompt": {"literal": "gentle wedding music"}}, "output": "music.mp3"},
                {"index": 2, "tool": "video_mp4_audio_mp3_to_video_mp4", "args": {"video": {"ref": "show.mp4"}, "audio": {"ref": "music.mp3"}}, "output": "final.mp4"},
                {"index": 3, "tool": "video_mp4_to_video_mp4", "args": {"videos": [{"ref": "final.mp4"}], "effect": {"literal": "fade"}}, "output": "graded.mp4"}
            ]
        }));
        assert!(r.is_empty(), "{r:?}");
    }

    #[test]
    fn text_task_without_text_output() {
        // A valid AV-T plan with its final captioning step removed.
        let r = rules(json!({
            "query": "describe the concert", "task_type": "AV-T", "materials": ["a.mp3", "v.mp4"],
            "steps": [
                {"index": 0, "tool": "video_mp4_audio_mp3_to_video_mp4", "args": {"video": {"ref": "v.mp4"}, "audio": {"ref": "a.mp3"}}, "output": "merged.mp4"}
            ]
        }));
        assert_eq!(r, vec![LintRule::NoFinalOutputForTask]);
    }

    #[test]
    fn ungrounded_speech() {
        let base = json!({
            "query": "narrate the mountain hike", "task_type": "IV-A", "materials": ["p.png", "v.mp4"],
            "steps": [
                {"index": 0, "tool": "text_txt_to_text_txt", "args": {"instruction": {"literal": "write something nice"}}, "output": "script.txt"},
                {"index": 1, "tool": "text_txt_to_speech_mp3", "args": {"script": {"ref": "script.txt"}}, "output": "voice.mp3"}
            ]
        });
        assert_eq!(rules(base.clone()), vec![LintRule::SpeechWithoutScript]);

        let mut grounded_by_query = base.clone();
        grounded_by_query["steps"][0]["args"]["instruction"] = json!({"literal": "narrate the mountain hike"});
        assert!(rules(grounded_by_query).is_empty());

        let grounded_by_material = json!({
            "query": "narrate the mountain hike", "task_type": "IV-A", "materials": ["p.png", "v.mp4"],
            "steps": [
                {"index": 0, "tool": "image_png_to_text_txt", "args": {"image": {"ref": "p.png"}}, "output": "cap.txt"},
                {"index": 1, "tool": "text_txt_to_text_txt", "args": {"instruction": {"literal": "write something nice"}, "context": [{"ref": "cap.txt"}]}, "output": "script.txt"},
                {"index": 2, "tool": "text_txt_to_speech_mp3", "args": {"script": {"ref": "script.txt"}}, "output": "voice.mp3"}
            ]
        });
        assert!(rules(grounded_by_material).is_empty());
    }

    #[test]
    fn audio_propagates_through_video_edits() {
        let plan = parse_plan(&json!({
            "query": "q", "task_type": "AV-V", "materials": ["v.mp4", "a.mp3"],
            "steps": [
                {"index": 0, "tool": "video_mp4_audio_mp3_to_video_mp4", "args": {"video": {"ref": "v.mp4"}, "audio": {"ref": "a.mp3"}}, "output": "m.mp4"},
                {"index": 1, "tool": "video_mp4_to_video_mp4", "args": {"videos": [{"ref": "m.mp4"}]}, "output": "e.mp4"}
            ]
        }))
        .unwrap();
        let sources: Vec<_> = embedded_audio_sources(&plan, "e.mp4").iter().map(|r| r.filename().to_string()).collect();
        assert_eq!(sources, vec!["a.mp3"]);
        assert!(!has_embedded_audio(&plan, "v.mp4"));
    }
}

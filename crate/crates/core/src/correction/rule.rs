use std::collections::BTreeMap;

use serde_json::Value;

use super::{CriticClient, CriticError, CriticRequest, Feedback};
use crate::exec::StepStatus;
use crate::metrics::{Channel, MetricReport};
use crate::modality::{Extension, Modality};
use crate::plan::{
    embedded_audio_sources, lint_plan, serialize_plan, type_check_step, ArtifactRef, Binding, LintRule, Plan,
    PlanStep, StepArgument,
};
use crate::registry::{Expects, ToolLibrary, ToolSpec};
use crate::text;

pub const DEFAULT_METRIC_THRESHOLD: f64 = 0.6;
const MUSIC_PROMPT: &str = "background music that fits the video";
const LINT_ROUNDS: usize = 4;

/// Deterministic critic that repairs plans with a fixed rule table: reference
/// and typing fixes, then lint fixes, then tool swaps for failed steps, then
/// metric-driven rewrites. It only ever adds or edits steps.
#[derive(Debug, Clone, Copy)]
pub struct RuleCritic {
    pub metric_threshold: f64,
}

impl Default for RuleCritic {
    fn default() -> Self {
        Self {
            metric_threshold: DEFAULT_METRIC_THRESHOLD,
        }
    }
}

impl CriticClient for RuleCritic {
    fn propose(&self, request: &CriticRequest<'_>) -> Result<Value, CriticError> {
        let Some(plan) = request.plan else {
            return Err(CriticError::Unsupported(
                "the rule critic revises plans but does not write them".into(),
            ));
        };
        let mut plan = plan.clone();
        let lib = request.library;
        repair_types(&mut plan, lib);
        repair_lint(&mut plan, lib);
        if let Some(feedback) = request.feedback {
            swap_failed_tools(&mut plan, lib, feedback);
            if let Some(report) = &feedback.report {
                self.apply_metric_rewrites(&mut plan, lib, report);
            }
        }
        Ok(serialize_plan(&plan))
    }
}

/// Query keywords as a prompt; the raw query when it has none.
pub fn query_prompt(query: &str) -> String {
    let words = text::keywords(query);
    if words.is_empty() {
        query.to_string()
    } else {
        words.join(" ")
    }
}

/// The most recently available artifact with `extension` as seen from step
/// `before`: earlier step outputs first, then materials.
fn nearest_artifact(plan: &Plan, before: usize, extension: Extension) -> Option<ArtifactRef> {
    plan.steps[..before]
        .iter()
        .rev()
        .map(|s| &s.output)
        .chain(plan.materials.iter().rev())
        .find(|a| a.extension() == extension)
        .cloned()
}

fn resolves(plan: &Plan, before: usize, filename: &str) -> bool {
    plan.is_material(filename) || plan.steps[..before].iter().any(|s| s.output.filename() == filename)
}

fn accepts(param_expects: Expects, arg: &StepArgument) -> bool {
    match (param_expects, arg) {
        (Expects::Literal, StepArgument::Literal(_)) => true,
        (Expects::Media(m), StepArgument::Reference(r)) => r.extension() == m.canonical_extension(),
        _ => false,
    }
}

/// Rebuilds a step's arguments for `spec`, keeping whatever already fits,
/// redistributing stray file references by extension and filling required
/// gaps from earlier artifacts or the query.
fn rebind(plan: &Plan, i: usize, spec: &ToolSpec) -> BTreeMap<String, Binding> {
    let step = &plan.steps[i];
    let mut stray_refs: Vec<ArtifactRef> = Vec::new();
    let mut stray_literals: Vec<String> = Vec::new();
    let mut kept: BTreeMap<String, Vec<StepArgument>> = BTreeMap::new();

    for (name, binding) in &step.args {
        let param = spec.param(name);
        for arg in binding.items() {
            match param {
                Some(p) if accepts(p.expects, arg) => kept.entry(name.clone()).or_default().push(arg.clone()),
                _ => match arg {
                    StepArgument::Reference(r) => stray_refs.push(r.clone()),
                    StepArgument::Literal(l) => stray_literals.push(l.clone()),
                },
            }
        }
    }

    let mut args = BTreeMap::new();
    for p in &spec.params {
        let mut items = kept.remove(&p.name).unwrap_or_default();
        if let Expects::Media(m) = p.expects {
            let ext = m.canonical_extension();
            if items.is_empty() || p.repeatable {
                let (take, rest): (Vec<_>, Vec<_>) = stray_refs.drain(..).partition(|r| r.extension() == ext);
                stray_refs = rest;
                let room = if p.repeatable { take.len() } else { 1usize.saturating_sub(items.len()) };
                let mut take = take.into_iter();
                items.extend(take.by_ref().take(room).map(StepArgument::Reference));
                stray_refs.extend(take);
            }
            if items.is_empty() && p.required {
                if let Some(a) = nearest_artifact(plan, i, ext) {
                    items.push(StepArgument::Reference(a));
                }
            }
        } else if items.is_empty() {
            if let Some(l) = (!stray_literals.is_empty()).then(|| stray_literals.remove(0)) {
                items.push(StepArgument::Literal(l));
            } else if p.required {
                items.push(StepArgument::Literal(plan.query.clone()));
            }
        }
        if items.is_empty() {
            continue;
        }
        let was_list = matches!(step.args.get(&p.name), Some(Binding::List(_)));
        let binding = if p.repeatable && (items.len() > 1 || was_list) {
            Binding::List(items)
        } else {
            Binding::Single(items.swap_remove(0))
        };
        args.insert(p.name.clone(), binding);
    }
    args
}

/// Retargets dangling references to the nearest earlier artifact of the same
/// extension; drops them when nothing suitable exists.
fn repair_references(plan: &mut Plan, i: usize) {
    let snapshot = plan.clone();
    let step = &mut plan.steps[i];
    let mut emptied = Vec::new();
    for (name, binding) in step.args.iter_mut() {
        let items: Vec<StepArgument> = binding
            .items()
            .iter()
            .filter_map(|arg| match arg {
                StepArgument::Reference(r) if !resolves(&snapshot, i, r.filename()) => {
                    nearest_artifact(&snapshot, i, r.extension()).map(StepArgument::Reference)
                }
                other => Some(other.clone()),
            })
            .collect();
        match (binding.clone(), items.len()) {
            (_, 0) => emptied.push(name.clone()),
            (Binding::Single(_), _) => *binding = Binding::Single(items[0].clone()),
            (Binding::List(_), _) => *binding = Binding::List(items),
        }
    }
    for name in emptied {
        step.args.remove(&name);
    }
}

/// A clean retargeting of step `i` onto a known tool, or `None`.
fn best_tool_for(plan: &Plan, i: usize, lib: &ToolLibrary, output: Extension) -> Option<(String, BTreeMap<String, Binding>)> {
    let original: Vec<&ArtifactRef> = plan.steps[i].references().collect();
    let mut best: Option<(usize, String, BTreeMap<String, Binding>)> = None;
    for spec in lib.tools().filter(|t| t.output.extension() == output) {
        let args = rebind(plan, i, spec);
        let mut probe = plan.steps[i].clone();
        probe.tool = spec.canonical_name();
        probe.args = args.clone();
        if !type_check_step(&probe, spec).is_empty() {
            continue;
        }
        let kept = probe.references().filter(|r| original.contains(r)).count();
        if best.as_ref().is_none_or(|(k, _, _)| kept > *k) {
            best = Some((kept, spec.canonical_name(), args));
        }
    }
    best.map(|(_, name, args)| (name, args))
}

fn rename_output(plan: &mut Plan, i: usize, extension: Extension) {
    let old = plan.steps[i].output.clone();
    let fresh = plan.fresh_filename(old.stem(), extension);
    plan.steps[i].output = fresh.clone();
    plan.rename_references(i, old.filename(), &fresh);
}

/// Reference and typing fixes, one step at a time in index order.
pub fn repair_types(plan: &mut Plan, lib: &ToolLibrary) {
    for i in 0..plan.steps.len() {
        repair_references(plan, i);

        if lib.get(&plan.steps[i].tool).is_none() {
            let normalized = crate::registry::parse_tool_name(&plan.steps[i].tool)
                .ok()
                .map(|n| n.render())
                .filter(|n| lib.get(n).is_some());
            if let Some(name) = normalized {
                plan.steps[i].tool = name;
            } else if let Some((name, args)) = best_tool_for(plan, i, lib, plan.steps[i].output.extension()) {
                plan.steps[i].tool = name;
                plan.steps[i].args = args;
            } else {
                continue;
            }
        }

        let spec = lib.get(&plan.steps[i].tool).expect("tool resolved above");
        if plan.steps[i].output.extension() != spec.output.extension() {
            rename_output(plan, i, spec.output.extension());
        }
        if !type_check_step(&plan.steps[i], spec).is_empty() {
            plan.steps[i].args = rebind(plan, i, spec);
        }
    }
}

fn music_tool(lib: &ToolLibrary) -> Option<&ToolSpec> {
    lib.tools().find(|t| {
        t.output.modality() == Modality::Audio
            && t.name.inputs().iter().map(|f| f.extension()).eq([Extension::Txt])
    })
}

fn text_tool(lib: &ToolLibrary) -> Option<&ToolSpec> {
    lib.find(&[Extension::Txt], Extension::Txt)
}

/// Arguments for a new step appended at `position`: `primary` goes to the first
/// media parameter that accepts it, the first literal parameter gets `literal`,
/// other required parameters are filled from earlier artifacts or `literal`.
fn fill_args(
    plan: &Plan,
    position: usize,
    spec: &ToolSpec,
    primary: &[ArtifactRef],
    literal: &str,
) -> Option<BTreeMap<String, Binding>> {
    let mut args = BTreeMap::new();
    let mut pending: Vec<&ArtifactRef> = primary.iter().collect();
    let mut literal_used = false;
    for p in &spec.params {
        match p.expects {
            Expects::Media(m) => {
                let ext = m.canonical_extension();
                let mine: Vec<ArtifactRef> = pending.iter().filter(|a| a.extension() == ext).map(|a| (*a).clone()).collect();
                if let Some(first) = mine.first() {
                    pending.retain(|a| a.extension() != ext);
                    let binding = if p.repeatable {
                        Binding::List(mine.iter().cloned().map(StepArgument::Reference).collect())
                    } else {
                        Binding::Single(StepArgument::Reference(first.clone()))
                    };
                    args.insert(p.name.clone(), binding);
                } else if p.required {
                    let a = nearest_artifact(plan, position, ext)?;
                    let arg = StepArgument::Reference(a);
                    args.insert(
                        p.name.clone(),
                        if p.repeatable { Binding::List(vec![arg]) } else { Binding::Single(arg) },
                    );
                }
            }
            Expects::Literal => {
                if p.required || (!literal_used && !literal.is_empty()) {
                    literal_used = true;
                    args.insert(p.name.clone(), Binding::Single(StepArgument::literal(literal)));
                }
            }
        }
    }
    Some(args)
}

fn new_step(tool: &ToolSpec, args: BTreeMap<String, Binding>, output: ArtifactRef) -> PlanStep {
    PlanStep {
        index: 0,
        tool: tool.canonical_name(),
        args,
        output,
    }
}

fn fix_video_without_audio(plan: &mut Plan, lib: &ToolLibrary, step: usize) -> bool {
    let (Some(music), Some(mux)) = (music_tool(lib), lib.find(&[Extension::Mp4, Extension::Mp3], Extension::Mp4)) else {
        return false;
    };
    let video = plan.steps[step].output.clone();
    let end = plan.steps.len();
    let track = plan.fresh_filename(&format!("{}_music", video.stem()), Extension::Mp3);
    let Some(music_args) = fill_args(plan, end, music, &[], MUSIC_PROMPT) else {
        return false;
    };
    plan.insert_step(end, new_step(music, music_args, track.clone()));
    let merged = plan.fresh_filename(&format!("{}_with_audio", video.stem()), Extension::Mp4);
    let Some(mux_args) = fill_args(plan, end + 1, mux, &[video, track], "") else {
        plan.steps.pop();
        return false;
    };
    plan.insert_step(end + 1, new_step(mux, mux_args, merged));
    true
}

fn fix_speech_without_script(plan: &mut Plan, lib: &ToolLibrary, step: usize) -> bool {
    let Some(spec) = lib.get(&plan.steps[step].tool) else { return false };
    let script_param = spec
        .params
        .iter()
        .find(|p| p.expects == Expects::Media(Modality::Text))
        .map(|p| (p.name.clone(), p.repeatable));
    match script_param {
        Some((name, repeatable)) => {
            let Some(writer) = text_tool(lib) else { return false };
            let Some(args) = fill_args(plan, step, writer, &[], &plan.query) else { return false };
            let script = plan.fresh_filename("script", Extension::Txt);
            plan.insert_step(step, new_step(writer, args, script.clone()));
            let arg = StepArgument::Reference(script);
            plan.steps[step + 1].args.insert(
                name,
                if repeatable { Binding::List(vec![arg]) } else { Binding::Single(arg) },
            );
            true
        }
        None => {
            let Some(p) = spec.params.iter().find(|p| p.expects == Expects::Literal) else { return false };
            let query = plan.query.clone();
            plan.steps[step].args.insert(p.name.clone(), Binding::Single(StepArgument::literal(query)));
            true
        }
    }
}

fn fix_missing_final_output(plan: &mut Plan, lib: &ToolLibrary) -> bool {
    let wanted = plan.task_type.output();
    let target = wanted.canonical_extension();
    let end = plan.steps.len();
    let candidates: Vec<ArtifactRef> = plan
        .steps
        .iter()
        .rev()
        .map(|s| s.output.clone())
        .chain(plan.materials.iter().rev().cloned())
        .collect();
    for source in candidates {
        let tools: Vec<&ToolSpec> = lib
            .tools()
            .filter(|t| {
                t.output.extension() == target
                    && t.name.inputs().iter().map(|f| f.extension()).eq([source.extension()])
            })
            .collect();
        let Some(tool) = tools
            .iter()
            .find(|t| t.output.modality() == wanted)
            .or(tools.first())
        else {
            continue;
        };
        let prompt = query_prompt(&plan.query);
        let Some(args) = fill_args(plan, end, tool, std::slice::from_ref(&source), &prompt) else { continue };
        let output = plan.fresh_filename(&format!("final_{}", wanted.token()), target);
        plan.insert_step(end, new_step(tool, args, output));
        return true;
    }
    false
}

/// Applies lint fixes until the plan is advisory-free or stops changing.
pub fn repair_lint(plan: &mut Plan, lib: &ToolLibrary) {
    for _ in 0..LINT_ROUNDS {
        let advisories = lint_plan(plan, lib);
        if advisories.is_empty() {
            return;
        }
        let mut changed = false;
        // Fix from the back so that step indices of pending advisories stay valid.
        for advisory in advisories.iter().rev() {
            changed |= match (advisory.rule, advisory.step) {
                (LintRule::VideoWithoutAudio, Some(s)) => fix_video_without_audio(plan, lib, s),
                (LintRule::SpeechWithoutScript, Some(s)) => fix_speech_without_script(plan, lib, s),
                (LintRule::NoFinalOutputForTask, _) => fix_missing_final_output(plan, lib),
                _ => false,
            };
        }
        if !changed {
            return;
        }
    }
}

/// A different tool that accepts the step exactly as written, first by name.
pub fn call_compatible_alternative<'a>(step: &PlanStep, lib: &'a ToolLibrary) -> Option<&'a ToolSpec> {
    lib.tools().find(|t| {
        t.canonical_name() != step.tool && {
            let mut probe = step.clone();
            probe.tool = t.canonical_name();
            type_check_step(&probe, t).is_empty()
        }
    })
}

fn swap_failed_tools(plan: &mut Plan, lib: &ToolLibrary, feedback: &Feedback) {
    let Some(trace) = &feedback.trace else { return };
    for r in &trace.results {
        if r.status != StepStatus::Failed || !r.message.starts_with("tool:") {
            continue;
        }
        let Some(step) = plan.steps.get(r.index) else { continue };
        if let Some(alt) = call_compatible_alternative(step, lib) {
            plan.steps[r.index].tool = alt.canonical_name();
        }
    }
}

impl RuleCritic {
    fn low(&self, report: &MetricReport, channel: Channel) -> bool {
        report.normalized(channel).is_some_and(|v| v < self.metric_threshold)
    }

    fn apply_metric_rewrites(&self, plan: &mut Plan, lib: &ToolLibrary, report: &MetricReport) {
        let prompt = query_prompt(&plan.query);

        // Soundtracks that do not match the picture or the request.
        let audio_low = self.low(report, Channel::AvAlignment)
            || self.low(report, Channel::AudioNeed)
            || self.low(report, Channel::AudioEmotion);
        if audio_low {
            let finals: Vec<String> = plan.final_outputs().iter().map(|r| r.filename().to_string()).collect();
            for video in finals.iter().filter(|f| f.ends_with(".mp4")) {
                for track in embedded_audio_sources(plan, video) {
                    let Some(p) = plan.producer(track.filename()) else { continue };
                    let Some(spec) = lib.get(&plan.steps[p].tool) else { continue };
                    let literal = spec
                        .param("prompt")
                        .filter(|q| q.expects == Expects::Literal)
                        .or_else(|| spec.params.iter().find(|q| q.expects == Expects::Literal));
                    if let Some(param) = literal {
                        plan.steps[p]
                            .args
                            .insert(param.name.clone(), Binding::Single(StepArgument::literal(prompt.clone())));
                    }
                }
            }
        }

        // One refinement pass per output modality that scored low.
        let families: [(Extension, &[Channel]); 4] = [
            (Extension::Mp4, &[Channel::VideoNeed, Channel::VideoEmotion, Channel::VideoAesthetic]),
            (Extension::Png, &[Channel::ImageNeed, Channel::ImageEmotion, Channel::ImageAesthetic]),
            (Extension::Mp3, &[Channel::AudioNeed, Channel::AudioEmotion]),
            (Extension::Txt, &[Channel::TextAlignment]),
        ];
        for (ext, channels) in families {
            if !channels.iter().any(|&c| self.low(report, c)) {
                continue;
            }
            let Some(target) = plan.final_outputs().into_iter().rev().find(|r| r.extension() == ext).cloned() else {
                continue;
            };
            let Some(refiner) = lib.find(&[ext], ext) else { continue };
            let end = plan.steps.len();
            let Some(args) = fill_args(plan, end, refiner, std::slice::from_ref(&target), &prompt) else {
                continue;
            };
            let output = plan.fresh_filename(&format!("{}_refined", target.stem()), ext);
            plan.insert_step(end, new_step(refiner, args, output));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{parse_plan, validate_plan};
    use serde_json::json;

    fn critic_pass(plan: &Plan, feedback: Option<&Feedback>) -> Plan {
        let lib = ToolLibrary::builtin();
        let request = CriticRequest {
            query: &plan.query,
            task_type: plan.task_type,
            materials: &plan.materials,
            library: &lib,
            plan: Some(plan),
            feedback,
        };
        parse_plan(&RuleCritic::default().propose(&request).unwrap()).unwrap()
    }

    fn slideshow() -> Plan {
        parse_plan(&json!({
            "query": "wedding photos slideshow", "task_type": "MI-V", "materials": ["a.png", "b.png"],
            "steps": [{"index": 0, "tool": "image_png_to_video_mp4", "args": {"images": [{"ref": "a.png"}, {"ref": "b.png"}]}, "output": "show.mp4"}]
        }))
        .unwrap()
    }

    #[test]
    fn clean_plan_is_a_fixed_point() {
        let mut plan = slideshow();
        repair_lint(&mut plan, &ToolLibrary::builtin());
        assert_eq!(critic_pass(&plan, None), plan);
    }

    #[test]
    fn adds_music_and_merge() {
        let fixed = critic_pass(&slideshow(), None);
        let tools: Vec<_> = fixed.steps.iter().map(|s| s.tool.as_str()).collect();
        assert_eq!(
            tools,
            vec!["image_png_to_video_mp4", "text_txt_to_audio_mp3", "video_mp4_audio_mp3_to_video_mp4"]
        );
        assert_eq!(fixed.steps[2].output.filename(), "show_with_audio.mp4");
        assert!(lint_plan(&fixed, &ToolLibrary::builtin()).is_empty());
    }

    #[test]
    fn output_extension_corrected() {
        let mut plan = slideshow();
        plan.steps[0].output = ArtifactRef::parse("show.png").unwrap();
        repair_types(&mut plan, &ToolLibrary::builtin());
        assert_eq!(plan.steps[0].output.filename(), "show.mp4");
        assert!(validate_plan(&plan, &ToolLibrary::builtin()).is_empty());
    }

    #[test]
    fn downstream_refs_follow_renamed_output() {
        let mut plan = parse_plan(&json!({
            "query": "q", "task_type": "IA-V", "materials": [],
            "steps": [
                {"index": 0, "tool": "text_txt_to_image_png", "args": {"prompt": {"literal": "cat"}}, "output": "cat.mp4"},
                {"index": 1, "tool": "image_png_to_video_mp4", "args": {"images": [{"ref": "cat.mp4"}]}, "output": "clip.mp4"}
            ]
        }))
        .unwrap();
        repair_types(&mut plan, &ToolLibrary::builtin());
        assert_eq!(plan.steps[0].output.filename(), "cat.png");
        assert!(validate_plan(&plan, &ToolLibrary::builtin()).is_empty());
    }

    #[test]
    fn alternative_scan_matches_exhaustive_search() {
        let lib = ToolLibrary::builtin();
        let plan = slideshow();
        let alt = call_compatible_alternative(&plan.steps[0], &lib).map(|t| t.canonical_name());
        let mut exhaustive = Vec::new();
        for t in lib.tools() {
            let mut probe = plan.steps[0].clone();
            probe.tool = t.canonical_name();
            if probe.tool != plan.steps[0].tool && type_check_step(&probe, t).is_empty() {
                exhaustive.push(probe.tool);
            }
        }
        assert_eq!(alt, exhaustive.first().cloned());
        assert_eq!(alt.as_deref(), Some("image_png_text_txt_to_video_mp4"));
    }

    #[test]
    fn low_av_alignment_rewrites_music_prompt() {
        let plan = critic_pass(&slideshow(), None);
        let mut scores = BTreeMap::new();
        for c in crate::metrics::channels_for(Modality::Video, true) {
            scores.insert(c, c.range().1);
        }
        scores.insert(Channel::AvAlignment, 1.0);
        let feedback = Feedback {
            report: Some(MetricReport::new(plan.plan_id(), scores)),
            ..Default::default()
        };
        let revised = critic_pass(&plan, Some(&feedback));
        assert_eq!(revised.steps.len(), plan.steps.len());
        assert_eq!(
            revised.steps[1].args["prompt"],
            Binding::Single(StepArgument::literal("wedding photos slideshow"))
        );
    }

    #[test]
    fn perfect_report_changes_nothing() {
        let plan = critic_pass(&slideshow(), None);
        let scores = crate::metrics::channels_for(Modality::Video, true)
            .into_iter()
            .map(|c| (c, c.range().1))
            .collect();
        let feedback = Feedback {
            report: Some(MetricReport::new(plan.plan_id(), scores)),
            ..Default::default()
        };
        assert_eq!(critic_pass(&plan, Some(&feedback)), plan);
    }
}

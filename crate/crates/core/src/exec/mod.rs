//! Plan execution over a pluggable tool backend.

mod mock;
mod workspace;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::media;
use crate::plan::{type_check_step, Binding, Plan, PlanStep, StepArgument};
use crate::registry::{ToolLibrary, ToolSpec};

pub use mock::{mock_descriptor, FailureModel, MockBackend};
pub use workspace::{Artifact, Workspace, WorkspaceError};

/// Why a backend is being called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    PlanStep,
    /// Speech/audio-to-text for scoring. Not part of any plan.
    Transcription,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoundValue {
    Literal(String),
    Artifact { filename: String, bytes: Arc<[u8]> },
    List(Vec<BoundValue>),
}

#[derive(Debug, Clone)]
pub struct ToolRequest<'a> {
    pub spec: &'a ToolSpec,
    pub plan_id: &'a str,
    pub step_index: usize,
    pub purpose: Purpose,
    pub args: BTreeMap<String, BoundValue>,
    pub output_filename: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Produced { filename: String, bytes: Vec<u8> },
    Failed { reason: String },
}

pub trait ToolBackend: Send + Sync {
    fn execute(&self, request: &ToolRequest<'_>) -> Outcome;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Success,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResult {
    pub index: usize,
    pub status: StepStatus,
    pub message: String,
    pub duration_ms: u64,
}

// Wall-clock time is not part of a result's identity.
impl PartialEq for StepResult {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index && self.status == other.status && self.message == other.message
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub plan_id: String,
    pub results: Vec<StepResult>,
    pub final_artifacts: Vec<String>,
    pub overall_success: bool,
    pub aborted: bool,
}

impl ExecutionTrace {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("trace serializes")
    }

    pub fn from_value(value: Value) -> Result<Self, serde_json::Error> {
        serde_json::from_value(value)
    }

    /// Zeroes every duration so that traces can be compared byte for byte.
    pub fn strip_timing(&mut self) {
        for r in &mut self.results {
            r.duration_ms = 0;
        }
    }

    pub fn failed_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.results
            .iter()
            .filter(|r| r.status == StepStatus::Failed)
            .map(|r| r.index)
    }
}

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("execution aborted: {source}")]
    Workspace {
        #[source]
        source: WorkspaceError,
        trace: Box<ExecutionTrace>,
    },
}

impl ExecutionError {
    pub fn trace(&self) -> &ExecutionTrace {
        match self {
            ExecutionError::Workspace { trace, .. } => trace,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no traces given")]
pub struct EmptyInput;

/// Fraction of traces that succeeded overall.
pub fn success_rate(traces: &[ExecutionTrace]) -> Result<f64, EmptyInput> {
    if traces.is_empty() {
        return Err(EmptyInput);
    }
    let ok = traces.iter().filter(|t| t.overall_success).count();
    Ok(ok as f64 / traces.len() as f64)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptionError {
    #[error("the tool library has no audio-to-text tool")]
    MissingTranscriptionTool,
    #[error("transcription of `{filename}` failed: {reason}")]
    Failed { filename: String, reason: String },
}

/// Turns an audio track into text with the library's designated transcriber,
/// going through the same backend as plan steps.
pub fn transcribe(
    lib: &ToolLibrary,
    backend: &dyn ToolBackend,
    plan_id: &str,
    filename: &str,
    bytes: Arc<[u8]>,
) -> Result<String, TranscriptionError> {
    let spec = lib
        .transcription_tool()
        .ok_or(TranscriptionError::MissingTranscriptionTool)?;
    let param = spec
        .media_params()
        .next()
        .expect("transcription tool takes an audio file");
    let stem = filename.rsplit_once('.').map_or(filename, |(s, _)| s);
    let output = format!("{stem}_transcript.txt");
    let request = ToolRequest {
        spec,
        plan_id,
        step_index: 0,
        purpose: Purpose::Transcription,
        args: BTreeMap::from([(
            param.name.clone(),
            BoundValue::Artifact {
                filename: filename.to_string(),
                bytes,
            },
        )]),
        output_filename: &output,
    };
    match backend.execute(&request) {
        Outcome::Produced { bytes, .. } => Ok(String::from_utf8_lossy(&bytes).into_owned()),
        Outcome::Failed { reason } => Err(TranscriptionError::Failed {
            filename: filename.to_string(),
            reason,
        }),
    }
}

/// Per-step static facts the executor needs before running anything.
struct Preflight {
    /// Earlier steps each step reads from.
    deps: Vec<BTreeSet<usize>>,
    /// Plan-format problems that make a step unrunnable.
    format_errors: Vec<Option<String>>,
}

fn preflight(plan: &Plan, lib: &ToolLibrary) -> Preflight {
    let n = plan.steps.len();
    let mut deps = vec![BTreeSet::new(); n];
    let mut format_errors = vec![None; n];
    for (i, step) in plan.steps.iter().enumerate() {
        let mut problems = Vec::new();
        for r in step.references() {
            let producer = plan.steps[..i]
                .iter()
                .rposition(|s| s.output.filename() == r.filename());
            match producer {
                Some(p) => {
                    deps[i].insert(p);
                }
                None if plan.is_material(r.filename()) => {}
                None if plan.steps[i..].iter().any(|s| s.output.filename() == r.filename()) => {
                    problems.push(format!("ForwardReference `{r}`"))
                }
                None => problems.push(format!("UnresolvedReference `{r}`")),
            }
        }
        match lib.get(&step.tool) {
            None => problems.push(format!("UnknownTool `{}`", step.tool)),
            Some(spec) => problems.extend(type_check_step(step, spec).iter().map(|d| format!("{} {}", d.kind, d.message))),
        }
        if !problems.is_empty() {
            format_errors[i] = Some(format!("plan-format: {}", problems.join("; ")));
        }
    }
    Preflight { deps, format_errors }
}

fn bind(step: &PlanStep, ws: &Workspace) -> Result<BTreeMap<String, BoundValue>, WorkspaceError> {
    let bind_arg = |arg: &StepArgument| -> Result<BoundValue, WorkspaceError> {
        match arg {
            StepArgument::Literal(s) => Ok(BoundValue::Literal(s.clone())),
            StepArgument::Reference(r) => {
                let artifact = ws
                    .read(r.filename())
                    .ok_or_else(|| WorkspaceError::MissingMaterial(r.filename().to_string()))?;
                Ok(BoundValue::Artifact {
                    filename: r.filename().to_string(),
                    bytes: artifact.bytes,
                })
            }
        }
    };
    step.args
        .iter()
        .map(|(name, binding)| {
            let value = match binding {
                Binding::Single(a) => bind_arg(a)?,
                Binding::List(items) => BoundValue::List(items.iter().map(bind_arg).collect::<Result<_, _>>()?),
            };
            Ok((name.clone(), value))
        })
        .collect()
}

struct Run<'a> {
    plan: &'a Plan,
    plan_id: String,
    lib: &'a ToolLibrary,
    backend: &'a dyn ToolBackend,
    ws: &'a Workspace,
    pre: Preflight,
}

impl Run<'_> {
    /// Runs step `i` given the statuses of all earlier steps it depends on.
    fn step(&self, i: usize, statuses: &[Option<StepStatus>]) -> Result<StepResult, WorkspaceError> {
        let started = Instant::now();
        let step = &self.plan.steps[i];
        let (status, message) = if let Some(err) = &self.pre.format_errors[i] {
            (StepStatus::Failed, err.clone())
        } else if let Some(&blocked) = self.pre.deps[i]
            .iter()
            .find(|&&d| statuses[d] != Some(StepStatus::Success))
        {
            (StepStatus::Skipped, format!("dependency step {blocked} did not succeed"))
        } else {
            let spec = self.lib.get(&step.tool).expect("checked in preflight");
            let request = ToolRequest {
                spec,
                plan_id: &self.plan_id,
                step_index: i,
                purpose: Purpose::PlanStep,
                args: bind(step, self.ws)?,
                output_filename: step.output.filename(),
            };
            match self.backend.execute(&request) {
                Outcome::Failed { reason } => (StepStatus::Failed, format!("tool: {reason}")),
                Outcome::Produced { filename, .. } if filename != step.output.filename() => (
                    StepStatus::Failed,
                    format!("tool: returned `{filename}` instead of `{}`", step.output),
                ),
                Outcome::Produced { bytes, .. } if !media::looks_valid(step.output.extension(), &bytes) => (
                    StepStatus::Failed,
                    format!("tool: returned a malformed .{} file", step.output.extension()),
                ),
                Outcome::Produced { bytes, .. } => {
                    self.ws.write(&step.output, spec.output.modality(), bytes)?;
                    (StepStatus::Success, format!("produced {}", step.output))
                }
            }
        };
        Ok(StepResult {
            index: i,
            status,
            message,
            duration_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn finish(&self, results: Vec<StepResult>, aborted: bool) -> ExecutionTrace {
        let done = |i: usize| results.get(i).is_some_and(|r| r.status == StepStatus::Success);
        let final_artifacts = self
            .plan
            .final_outputs()
            .into_iter()
            .filter(|r| self.plan.producer(r.filename()).is_some_and(done))
            .map(|r| r.filename().to_string())
            .collect();
        let overall_success = !aborted && results.iter().all(|r| r.status == StepStatus::Success);
        ExecutionTrace {
            plan_id: self.plan_id.clone(),
            results,
            final_artifacts,
            overall_success,
            aborted,
        }
    }

    fn abort(&self, source: WorkspaceError, results: Vec<StepResult>) -> ExecutionError {
        ExecutionError::Workspace {
            source,
            trace: Box::new(self.finish(results, true)),
        }
    }
}

fn start<'a>(
    plan: &'a Plan,
    lib: &'a ToolLibrary,
    backend: &'a dyn ToolBackend,
    ws: &'a Workspace,
) -> Result<Run<'a>, ExecutionError> {
    let run = Run {
        plan,
        plan_id: plan.plan_id(),
        lib,
        backend,
        ws,
        pre: preflight(plan, lib),
    };
    if let Some(missing) = plan.materials.iter().find(|m| !ws.contains(m.filename())) {
        return Err(run.abort(WorkspaceError::MissingMaterial(missing.filename().to_string()), Vec::new()));
    }
    Ok(run)
}

/// Executes steps in index order. A failed step does not stop independent
/// branches; its dependents are skipped.
pub fn execute_plan(
    plan: &Plan,
    lib: &ToolLibrary,
    backend: &dyn ToolBackend,
    ws: &Workspace,
) -> Result<ExecutionTrace, ExecutionError> {
    let run = start(plan, lib, backend, ws)?;
    let mut statuses = vec![None; plan.steps.len()];
    let mut results = Vec::with_capacity(plan.steps.len());
    for i in 0..plan.steps.len() {
        match run.step(i, &statuses) {
            Ok(r) => {
                statuses[i] = Some(r.status);
                results.push(r);
            }
            Err(e) => return Err(run.abort(e, results)),
        }
    }
    Ok(run.finish(results, false))
}

/// Like [`execute_plan`], but steps at the same dependency depth run
/// concurrently. Produces the same trace.
pub fn execute_plan_parallel(
    plan: &Plan,
    lib: &ToolLibrary,
    backend: &dyn ToolBackend,
    ws: &Workspace,
) -> Result<ExecutionTrace, ExecutionError> {
    let run = start(plan, lib, backend, ws)?;
    let n = plan.steps.len();
    let mut level = vec![0usize; n];
    for i in 0..n {
        level[i] = run.pre.deps[i].iter().map(|&d| level[d] + 1).max().unwrap_or(0);
    }
    let depth = level.iter().copied().max().map_or(0, |m| m + 1);

    let mut statuses = vec![None; n];
    let mut slots: Vec<Option<StepResult>> = vec![None; n];
    for l in 0..depth {
        let batch: Vec<usize> = (0..n).filter(|&i| level[i] == l).collect();
        let outcomes: Vec<_> = batch.par_iter().map(|&i| run.step(i, &statuses)).collect();
        let mut first_error = None;
        for (i, outcome) in batch.into_iter().zip(outcomes) {
            match outcome {
                Ok(r) => {
                    statuses[i] = Some(r.status);
                    slots[i] = Some(r);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            let partial = slots.into_iter().map_while(|s| s).collect();
            return Err(run.abort(e, partial));
        }
    }
    Ok(run.finish(slots.into_iter().map(|s| s.expect("every step ran")).collect(), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::parse_plan;
    use serde_json::json;

    fn diamond() -> Plan {
        parse_plan(&json!({
            "query": "mountain sunrise", "task_type": "MI-V", "materials": ["m.png"],
            "steps": [
                {"index": 0, "tool": "image_png_to_image_png", "args": {"image": {"ref": "m.png"}, "instruction": {"literal": "brighten"}}, "output": "base.png"},
                {"index": 1, "tool": "text_txt_to_image_png", "args": {"prompt": {"literal": "sunrise"}}, "output": "l.png"},
                {"index": 2, "tool": "image_png_to_audio_mp3", "args": {"images": [{"ref": "base.png"}]}, "output": "r.mp3"},
                {"index": 3, "tool": "image_png_audio_mp3_to_video_mp4", "args": {"images": [{"ref": "l.png"}, {"ref": "base.png"}], "audio": {"ref": "r.mp3"}}, "output": "out.mp4"}
            ]
        }))
        .unwrap()
    }

    fn staged() -> Workspace {
        let ws = Workspace::in_memory();
        ws.stage("m.png", media::placeholder(crate::Extension::Png, "mountain")).unwrap();
        ws
    }

    #[test]
    fn empty_plan_succeeds_vacuously() {
        let plan = parse_plan(&json!({"query": "q", "task_type": "MI-T", "materials": [], "steps": []})).unwrap();
        let t = execute_plan(&plan, &ToolLibrary::builtin(), &MockBackend::default(), &Workspace::in_memory()).unwrap();
        assert!(t.overall_success && t.results.is_empty() && !t.aborted);
    }

    #[test]
    fn failure_skips_dependents_only() {
        let lib = ToolLibrary::builtin();
        let backend = MockBackend::new(FailureModel::new(0.0, 0).always_fail("text_txt_to_image_png"));
        let ws = staged();
        let t = execute_plan(&diamond(), &lib, &backend, &ws).unwrap();
        let statuses: Vec<_> = t.results.iter().map(|r| r.status).collect();
        use StepStatus::*;
        assert_eq!(statuses, vec![Success, Failed, Success, Skipped]);
        assert!(!t.overall_success);
        assert!(t.final_artifacts.is_empty());
        assert_eq!(ws.filenames(), vec!["base.png", "m.png", "r.mp3"]);
    }

    #[test]
    fn parallel_matches_sequential() {
        let lib = ToolLibrary::builtin();
        for seed in 0..20 {
            let backend = MockBackend::new(FailureModel::new(0.3, seed));
            let mut a = execute_plan(&diamond(), &lib, &backend, &staged()).unwrap();
            let mut b = execute_plan_parallel(&diamond(), &lib, &backend, &staged()).unwrap();
            a.strip_timing();
            b.strip_timing();
            assert_eq!(a.to_value().to_string(), b.to_value().to_string());
        }
    }

    #[test]
    fn missing_material_aborts() {
        let err = execute_plan(&diamond(), &ToolLibrary::builtin(), &MockBackend::default(), &Workspace::in_memory())
            .unwrap_err();
        assert!(err.trace().aborted);
        assert!(!err.trace().overall_success);
    }

    #[test]
    fn ill_typed_step_fails_as_plan_format() {
        let mut plan = diamond();
        plan.steps[1].tool = "text_txt_to_image_jpg".into();
        let t = execute_plan(&plan, &ToolLibrary::builtin(), &MockBackend::default(), &staged()).unwrap();
        assert!(t.results[1].message.starts_with("plan-format:"));
        assert_eq!(t.results[3].status, StepStatus::Skipped);
    }

    #[test]
    fn success_rate_counts() {
        let t = |ok| ExecutionTrace {
            plan_id: String::new(),
            results: vec![],
            final_artifacts: vec![],
            overall_success: ok,
            aborted: false,
        };
        assert_eq!(success_rate(&[t(true), t(true), t(false), t(true)]), Ok(0.75));
        assert_eq!(success_rate(&[]), Err(EmptyInput));
    }
}

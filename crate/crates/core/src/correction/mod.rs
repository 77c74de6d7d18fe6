//! Two-stage plan correction and lineage curation.
//!
//! Stage 1 asks a critic to repair a plan using static diagnostics and lint
//! advisories. Stage 2 executes the repaired plan, scores its output and asks
//! the critic to revise it again given the trace and the metric report.

mod rule;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::exec::{execute_plan, execute_plan_parallel, ExecutionTrace, ToolBackend, Workspace, WorkspaceError};
use crate::metrics::{score_output, ExecutedPlan, MetricReport, MetricsError, ScoreOptions, Scorer};
use crate::plan::{
    lint_plan, parse_plan, serialize_plan, validate_plan, Advisory, ArtifactRef, Diagnostic, Plan, PlanError,
    TaskType,
};
use crate::registry::ToolLibrary;

pub use rule::{call_compatible_alternative, query_prompt, repair_lint, repair_types, RuleCritic, DEFAULT_METRIC_THRESHOLD};

pub const DEFAULT_RETRIES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CriticError {
    #[error("critic unavailable: {0}")]
    Unavailable(String),
    #[error("critic cannot serve this request: {0}")]
    Unsupported(String),
}

/// Everything the critic is told about upstream problems.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Feedback {
    pub diagnostics: Vec<Diagnostic>,
    pub advisories: Vec<Advisory>,
    pub trace: Option<ExecutionTrace>,
    pub report: Option<MetricReport>,
    pub notes: Vec<String>,
}

impl Feedback {
    pub fn is_empty(&self) -> bool {
        self.diagnostics.is_empty()
            && self.advisories.is_empty()
            && self.trace.is_none()
            && self.report.is_none()
            && self.notes.is_empty()
    }

    /// Plain-text rendering sent to remote critics. Nothing is summarized away.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        if !self.diagnostics.is_empty() {
            out.push_str("diagnostics:\n");
            for d in &self.diagnostics {
                let _ = writeln!(out, "- {d}");
            }
        }
        if !self.advisories.is_empty() {
            out.push_str("advisories:\n");
            for a in &self.advisories {
                let _ = writeln!(out, "- {a}");
            }
        }
        if let Some(trace) = &self.trace {
            let _ = writeln!(out, "execution: overall_success={}", trace.overall_success);
            for r in &trace.results {
                let _ = writeln!(out, "- step {} {:?}: {}", r.index, r.status, r.message);
            }
        }
        if let Some(report) = &self.report {
            out.push_str("metrics:\n");
            for (channel, value) in &report.scores {
                let _ = writeln!(out, "{channel}={value}");
            }
            let _ = writeln!(out, "aggregate={}", report.aggregate);
            let _ = writeln!(out, "report: {}", report.to_value());
        }
        out
    }
}

pub struct CriticRequest<'a> {
    pub query: &'a str,
    pub task_type: TaskType,
    pub materials: &'a [ArtifactRef],
    pub library: &'a ToolLibrary,
    /// `None` asks for a fresh plan.
    pub plan: Option<&'a Plan>,
    pub feedback: Option<&'a Feedback>,
}

impl CriticRequest<'_> {
    /// Body of a `POST /propose` call.
    pub fn to_wire(&self) -> Value {
        json!({
            "query": self.query,
            "task_type": self.task_type.code(),
            "materials": self.materials.iter().map(|m| m.filename()).collect::<Vec<_>>(),
            "library_digest": self.library.digest(),
            "plan": self.plan.map(serialize_plan),
            "feedback": self.feedback.map(Feedback::render),
        })
    }
}

/// Proposes plan documents. The loop parses and checks whatever comes back.
pub trait CriticClient: Send + Sync {
    fn propose(&self, request: &CriticRequest<'_>) -> Result<Value, CriticError>;
}

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error("generator proposed an unusable plan: {0}")]
    GeneratorOutput(PlanError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub plan: Plan,
    /// Set when no proposal passed validation within the retry budget.
    pub unvalidated: bool,
    pub attempts: usize,
}

fn header_mismatch(proposal: &Plan, base: &Plan) -> Option<String> {
    if proposal.query != base.query {
        Some("the proposal changed the query".into())
    } else if proposal.task_type != base.task_type {
        Some("the proposal changed the task type".into())
    } else if proposal.materials != base.materials {
        Some("the proposal changed the materials".into())
    } else {
        None
    }
}

/// Calls the critic until it returns a plan that validates, at most `retries`
/// times. Later attempts see the diagnostics of the previous proposal.
fn run_stage(
    base: &Plan,
    lib: &ToolLibrary,
    critic: &dyn CriticClient,
    retries: usize,
    mut feedback: Feedback,
) -> Result<StageOutcome, CorrectionError> {
    let mut current = base.clone();
    let mut best: Option<Plan> = None;
    for attempt in 1..=retries.max(1) {
        let request = CriticRequest {
            query: &base.query,
            task_type: base.task_type,
            materials: &base.materials,
            library: lib,
            plan: Some(&current),
            feedback: Some(&feedback),
        };
        let document = critic.propose(&request)?;
        let proposal = match parse_plan(&document) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("attempt {attempt}: critic returned an unparseable plan: {e}");
                feedback = Feedback {
                    notes: vec![format!("the previous proposal could not be parsed: {e}")],
                    ..validation_feedback(&current, lib)
                };
                continue;
            }
        };
        if let Some(problem) = header_mismatch(&proposal, base) {
            log::warn!("attempt {attempt}: {problem}");
            feedback = Feedback {
                notes: vec![problem],
                ..validation_feedback(&current, lib)
            };
            continue;
        }
        let diagnostics = validate_plan(&proposal, lib);
        if diagnostics.is_empty() {
            return Ok(StageOutcome {
                plan: proposal,
                unvalidated: false,
                attempts: attempt,
            });
        }
        feedback = validation_feedback(&proposal, lib);
        best = Some(proposal.clone());
        current = proposal;
    }
    Ok(StageOutcome {
        plan: best.unwrap_or_else(|| base.clone()),
        unvalidated: true,
        attempts: retries.max(1),
    })
}

fn validation_feedback(plan: &Plan, lib: &ToolLibrary) -> Feedback {
    Feedback {
        diagnostics: validate_plan(plan, lib),
        advisories: lint_plan(plan, lib),
        ..Default::default()
    }
}

pub fn stage1_self_correct(
    plan1: &Plan,
    lib: &ToolLibrary,
    critic: &dyn CriticClient,
    retries: usize,
) -> Result<StageOutcome, CorrectionError> {
    run_stage(plan1, lib, critic, retries, validation_feedback(plan1, lib))
}

pub fn stage2_preference_correct(
    plan2: &Plan,
    trace: &ExecutionTrace,
    report: Option<&MetricReport>,
    lib: &ToolLibrary,
    critic: &dyn CriticClient,
    retries: usize,
) -> Result<StageOutcome, CorrectionError> {
    let feedback = Feedback {
        trace: Some(trace.clone()),
        report: report.cloned(),
        ..validation_feedback(plan2, lib)
    };
    run_stage(plan2, lib, critic, retries, feedback)
}

/// A user material: its filename in the plan and its content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Material {
    pub artifact: ArtifactRef,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationRequest {
    pub request_id: String,
    pub query: String,
    pub task_type: TaskType,
    pub materials: Vec<Material>,
}

impl CurationRequest {
    pub fn material_refs(&self) -> Vec<ArtifactRef> {
        self.materials.iter().map(|m| m.artifact.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurateOptions {
    pub retries: usize,
    /// Also execute (and score) the generator's plan.
    pub execute_plan1: bool,
    pub score_failed_plans: bool,
    pub parallel: bool,
    /// Run workspaces under `<root>/<request_id>/plan<N>`; in memory when unset.
    pub workspace_root: Option<PathBuf>,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self {
            retries: DEFAULT_RETRIES,
            execute_plan1: false,
            score_failed_plans: false,
            parallel: false,
            workspace_root: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unvalidated {
    pub stage1: bool,
    pub stage2: bool,
}

/// Plans 1, 2 and 3 for one request together with their runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanLineage {
    pub request_id: String,
    pub query: String,
    pub task_type: TaskType,
    pub materials: Vec<String>,
    pub library_digest: String,
    pub plan1: Plan,
    pub plan2: Plan,
    pub plan3: Plan,
    pub trace1: Option<ExecutionTrace>,
    pub report1: Option<MetricReport>,
    pub trace2: ExecutionTrace,
    pub report2: Option<MetricReport>,
    pub trace3: ExecutionTrace,
    pub report3: Option<MetricReport>,
    pub unvalidated: Unvalidated,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLineage {
    request_id: String,
    query: String,
    task_type: TaskType,
    materials: Vec<String>,
    library_digest: String,
    plan1: Value,
    plan2: Value,
    plan3: Value,
    trace1: Option<ExecutionTrace>,
    report1: Option<MetricReport>,
    trace2: ExecutionTrace,
    report2: Option<MetricReport>,
    trace3: ExecutionTrace,
    report3: Option<MetricReport>,
    unvalidated: Unvalidated,
}

#[derive(Debug, Error)]
pub enum LineageError {
    #[error("malformed lineage: {0}")]
    Schema(String),
    #[error("malformed plan in lineage: {0}")]
    Plan(#[from] PlanError),
}

impl PlanLineage {
    pub fn plans(&self) -> [&Plan; 3] {
        [&self.plan1, &self.plan2, &self.plan3]
    }

    pub fn strip_timing(&mut self) {
        for t in [self.trace1.as_mut(), Some(&mut self.trace2), Some(&mut self.trace3)]
            .into_iter()
            .flatten()
        {
            t.strip_timing();
        }
    }

    pub fn to_value(&self) -> Value {
        let raw = RawLineage {
            request_id: self.request_id.clone(),
            query: self.query.clone(),
            task_type: self.task_type,
            materials: self.materials.clone(),
            library_digest: self.library_digest.clone(),
            plan1: serialize_plan(&self.plan1),
            plan2: serialize_plan(&self.plan2),
            plan3: serialize_plan(&self.plan3),
            trace1: self.trace1.clone(),
            report1: self.report1.clone(),
            trace2: self.trace2.clone(),
            report2: self.report2.clone(),
            trace3: self.trace3.clone(),
            report3: self.report3.clone(),
            unvalidated: self.unvalidated,
        };
        serde_json::to_value(raw).expect("lineage serializes")
    }

    pub fn from_value(value: &Value) -> Result<Self, LineageError> {
        let raw: RawLineage =
            serde_json::from_value(value.clone()).map_err(|e| LineageError::Schema(e.to_string()))?;
        Ok(Self {
            request_id: raw.request_id,
            query: raw.query,
            task_type: raw.task_type,
            materials: raw.materials,
            library_digest: raw.library_digest,
            plan1: parse_plan(&raw.plan1)?,
            plan2: parse_plan(&raw.plan2)?,
            plan3: parse_plan(&raw.plan3)?,
            trace1: raw.trace1,
            report1: raw.report1,
            trace2: raw.trace2,
            report2: raw.report2,
            trace3: raw.trace3,
            report3: raw.report3,
            unvalidated: raw.unvalidated,
        })
    }
}

/// The collaborators one curation run needs.
pub struct Curator<'a> {
    pub lib: &'a ToolLibrary,
    pub generator: &'a dyn CriticClient,
    pub critic: &'a dyn CriticClient,
    pub backend: &'a dyn ToolBackend,
    pub scorer: &'a dyn Scorer,
    pub options: CurateOptions,
}

impl Curator<'_> {
    fn workspace(&self, request: &CurationRequest, label: &str) -> Result<Workspace, WorkspaceError> {
        let ws = match &self.options.workspace_root {
            None => Workspace::in_memory(),
            Some(root) => {
                let dir = root.join(&request.request_id).join(label);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|source| WorkspaceError::Io {
                        path: dir.clone(),
                        source,
                    })?;
                }
                Workspace::open(dir)?
            }
        };
        for m in &request.materials {
            ws.stage(m.artifact.filename(), m.bytes.clone())?;
        }
        Ok(ws)
    }

    /// Executes `plan` in a fresh workspace and scores it when allowed.
    pub fn run(
        &self,
        request: &CurationRequest,
        plan: &Plan,
        label: &str,
    ) -> Result<(ExecutionTrace, Option<MetricReport>), CorrectionError> {
        let ws = self.workspace(request, label)?;
        let executed = if self.options.parallel {
            execute_plan_parallel(plan, self.lib, self.backend, &ws)
        } else {
            execute_plan(plan, self.lib, self.backend, &ws)
        };
        let trace = executed.unwrap_or_else(|e| {
            log::warn!("{}/{label}: {e}", request.request_id);
            e.trace().clone()
        });
        let run = ExecutedPlan {
            plan,
            trace: &trace,
            lib: self.lib,
            backend: self.backend,
            workspace: &ws,
        };
        let options = ScoreOptions {
            score_failed_plans: self.options.score_failed_plans,
        };
        let report = match score_output(&run, self.scorer, options) {
            Ok(r) => Some(r),
            Err(MetricsError::NotScorable | MetricsError::NoArtifacts) => None,
            Err(e) => return Err(e.into()),
        };
        Ok((trace, report))
    }

    pub fn curate(&self, request: &CurationRequest) -> Result<PlanLineage, CorrectionError> {
        let materials = request.material_refs();
        let proposal = self.generator.propose(&CriticRequest {
            query: &request.query,
            task_type: request.task_type,
            materials: &materials,
            library: self.lib,
            plan: None,
            feedback: None,
        })?;
        let plan1 = parse_plan(&proposal).map_err(CorrectionError::GeneratorOutput)?;
        let expected = Plan::new(request.query.clone(), request.task_type, materials.clone());
        if let Some(problem) = header_mismatch(&plan1, &expected) {
            return Err(CorrectionError::GeneratorOutput(PlanError::SchemaError(problem)));
        }

        let (trace1, report1) = if self.options.execute_plan1 {
            let (t, r) = self.run(request, &plan1, "plan1")?;
            (Some(t), r)
        } else {
            (None, None)
        };

        let stage1 = stage1_self_correct(&plan1, self.lib, self.critic, self.options.retries)?;
        let (trace2, report2) = self.run(request, &stage1.plan, "plan2")?;
        let stage2 = stage2_preference_correct(
            &stage1.plan,
            &trace2,
            report2.as_ref(),
            self.lib,
            self.critic,
            self.options.retries,
        )?;
        let (trace3, report3) = self.run(request, &stage2.plan, "plan3")?;

        Ok(PlanLineage {
            request_id: request.request_id.clone(),
            query: request.query.clone(),
            task_type: request.task_type,
            materials: materials.iter().map(|m| m.filename().to_string()).collect(),
            library_digest: self.lib.digest(),
            plan1,
            plan2: stage1.plan,
            plan3: stage2.plan,
            trace1,
            report1,
            trace2,
            report2,
            trace3,
            report3,
            unvalidated: Unvalidated {
                stage1: stage1.unvalidated,
                stage2: stage2.unvalidated,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::DiagnosticKind;
    use std::sync::Mutex;

    /// Replays canned documents and records the feedback it was given.
    struct Scripted {
        replies: Mutex<Vec<Value>>,
        seen: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: Vec<Value>) -> Self {
            Self {
                replies: Mutex::new(replies.into_iter().rev().collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl CriticClient for Scripted {
        fn propose(&self, request: &CriticRequest<'_>) -> Result<Value, CriticError> {
            self.seen
                .lock()
                .unwrap()
                .push(request.feedback.map(Feedback::render).unwrap_or_default());
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| CriticError::Unavailable("out of replies".into()))
        }
    }

    fn broken() -> Value {
        json!({
            "query": "q", "task_type": "IA-V", "materials": [],
            "steps": [{"index": 0, "tool": "text_txt_to_video_mp4", "args": {"prompt": {"literal": "q"}}, "output": "v.png"}]
        })
    }

    #[test]
    fn retries_then_flags_unvalidated() {
        let lib = ToolLibrary::builtin();
        let plan = parse_plan(&broken()).unwrap();
        let critic = Scripted::new(vec![json!("garbage"), broken(), broken()]);
        let out = stage1_self_correct(&plan, &lib, &critic, 3).unwrap();
        assert!(out.unvalidated);
        assert_eq!(out.attempts, 3);
        let seen = critic.seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen[0].contains(DiagnosticKind::OutputFormatMismatch.id()));
        assert!(seen[1].contains("could not be parsed"));
    }

    #[test]
    fn accepts_first_valid_proposal() {
        let lib = ToolLibrary::builtin();
        let plan = parse_plan(&broken()).unwrap();
        let mut fixed = broken();
        fixed["steps"][0]["output"] = json!("v.mp4");
        let critic = Scripted::new(vec![broken(), fixed]);
        let out = stage1_self_correct(&plan, &lib, &critic, 3).unwrap();
        assert!(!out.unvalidated);
        assert_eq!(out.attempts, 2);
    }

    #[test]
    fn transport_failure_propagates() {
        let lib = ToolLibrary::builtin();
        let plan = parse_plan(&broken()).unwrap();
        let critic = Scripted::new(vec![]);
        assert!(matches!(
            stage1_self_correct(&plan, &lib, &critic, 3),
            Err(CorrectionError::Critic(CriticError::Unavailable(_)))
        ));
    }

    #[test]
    fn feedback_lists_every_metric() {
        let report = MetricReport::new(
            "p",
            crate::metrics::Channel::ALL.iter().enumerate().map(|(i, &c)| (c, 1.0 + i as f64 / 10.0)).collect(),
        );
        let text = Feedback {
            report: Some(report.clone()),
            ..Default::default()
        }
        .render();
        for (c, v) in &report.scores {
            assert!(text.contains(&format!("{c}={v}")), "{c}");
        }
        assert!(text.contains(&report.to_value().to_string()));
    }
}

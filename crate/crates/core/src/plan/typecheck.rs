//! Static checking of plans against a tool library.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{build_dependency_graph, Binding, Plan, PlanError, PlanStep, StepArgument};
use crate::registry::{Expects, ToolLibrary, ToolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiagnosticKind {
    UnknownTool,
    MissingParam,
    UnknownParam,
    ModalityMismatch,
    OutputFormatMismatch,
    LiteralToMediaParam,
    /// A list bound to a parameter that is not repeatable.
    ArityMismatch,
    UnresolvedReference,
    ForwardReference,
}

impl DiagnosticKind {
    pub fn id(self) -> &'static str {
        match self {
            DiagnosticKind::UnknownTool => "UnknownTool",
            DiagnosticKind::MissingParam => "MissingParam",
            DiagnosticKind::UnknownParam => "UnknownParam",
            DiagnosticKind::ModalityMismatch => "ModalityMismatch",
            DiagnosticKind::OutputFormatMismatch => "OutputFormatMismatch",
            DiagnosticKind::LiteralToMediaParam => "LiteralToMediaParam",
            DiagnosticKind::ArityMismatch => "ArityMismatch",
            DiagnosticKind::UnresolvedReference => "UnresolvedReference",
            DiagnosticKind::ForwardReference => "ForwardReference",
        }
    }
}

impl fmt::Display for DiagnosticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub step: usize,
    pub param: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} step={} {}", self.kind, self.step, self.message)
    }
}

fn diag(kind: DiagnosticKind, step: usize, param: Option<&str>, message: String) -> Diagnostic {
    Diagnostic {
        kind,
        step,
        param: param.map(str::to_string),
        message,
    }
}

/// Checks one step against `spec`. Used directly when probing whether a step
/// could be served by a different tool.
pub fn type_check_step(step: &PlanStep, spec: &ToolSpec) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let i = step.index;
    let mut out = Vec::new();

    if step.output.extension() != spec.output.extension() {
        out.push(diag(
            OutputFormatMismatch,
            i,
            None,
            format!(
                "output `{}` should have extension .{} for `{}`",
                step.output,
                spec.output.extension(),
                step.tool
            ),
        ));
    }

    for name in step.args.keys() {
        if spec.param(name).is_none() {
            out.push(diag(UnknownParam, i, Some(name), format!("`{}` has no parameter `{name}`", step.tool)));
        }
    }

    for param in &spec.params {
        let Some(binding) = step.args.get(&param.name) else {
            if param.required {
                out.push(diag(
                    MissingParam,
                    i,
                    Some(&param.name),
                    format!("required parameter `{}` is not bound", param.name),
                ));
            }
            continue;
        };
        if matches!(binding, Binding::List(_)) && !param.repeatable {
            out.push(diag(
                ArityMismatch,
                i,
                Some(&param.name),
                format!("parameter `{}` takes a single value, got a list", param.name),
            ));
        }
        for arg in binding.items() {
            match (arg, param.expects) {
                (StepArgument::Literal(_), Expects::Literal) => {}
                (StepArgument::Literal(_), Expects::Media(m)) => out.push(diag(
                    LiteralToMediaParam,
                    i,
                    Some(&param.name),
                    format!("parameter `{}` expects a {m} file, got a literal", param.name),
                )),
                (StepArgument::Reference(r), Expects::Literal) => out.push(diag(
                    ModalityMismatch,
                    i,
                    Some(&param.name),
                    format!("parameter `{}` expects literal text, got file `{r}`", param.name),
                )),
                (StepArgument::Reference(r), Expects::Media(m)) => {
                    if r.extension() != m.canonical_extension() {
                        out.push(diag(
                            ModalityMismatch,
                            i,
                            Some(&param.name),
                            format!(
                                "parameter `{}` expects {m} (.{}), got `{r}`",
                                param.name,
                                m.canonical_extension()
                            ),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Returns every typing diagnostic for the plan; empty means well-typed.
pub fn type_check_plan(plan: &Plan, lib: &ToolLibrary) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for step in &plan.steps {
        match lib.get(&step.tool) {
            Some(spec) => out.extend(type_check_step(step, spec)),
            None => out.push(diag(
                DiagnosticKind::UnknownTool,
                step.index,
                None,
                format!("tool `{}` is not in the library", step.tool),
            )),
        }
    }
    out
}

/// Dependency resolution followed by type checking, as one diagnostic list.
pub fn validate_plan(plan: &Plan, lib: &ToolLibrary) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if let Err(e) = build_dependency_graph(plan) {
        out.push(match &e {
            PlanError::ForwardReference { step, .. } => {
                diag(DiagnosticKind::ForwardReference, *step, None, e.to_string())
            }
            PlanError::UnresolvedReference { step, .. } => {
                diag(DiagnosticKind::UnresolvedReference, *step, None, e.to_string())
            }
            other => unreachable!("graph construction only reports reference errors: {other}"),
        });
    }
    out.extend(type_check_plan(plan, lib));
    out
}

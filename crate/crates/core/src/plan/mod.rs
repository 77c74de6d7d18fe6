//! Plan intermediate representation.
//!
//! A plan is an ordered list of tool invocations. Arguments are either inline
//! literals or references to artifacts by filename; a reference resolves to the
//! nearest earlier producer (a user material or an earlier step's output).
//! Documents are JSON; the canonical form is compact with sorted keys.

mod graph;
mod lint;
mod task;
mod typecheck;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest;
use crate::modality::{Extension, Modality};

pub use graph::{build_dependency_graph, DependencyGraph};
pub use lint::{embedded_audio_sources, has_embedded_audio, lint_plan, Advisory, LintRule};
pub use task::TaskType;
pub use typecheck::{type_check_plan, type_check_step, validate_plan, Diagnostic, DiagnosticKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("bad extension in `{0}`: expected exactly one of .png, .mp4, .mp3, .txt")]
    BadExtension(String),
    #[error("duplicate filename `{0}`")]
    DuplicateFilename(String),
    #[error("step {step}: `{filename}` is not produced by any material or earlier step")]
    UnresolvedReference { step: usize, filename: String },
    #[error("step {step}: `{filename}` is only produced by later step {producer}")]
    ForwardReference {
        step: usize,
        filename: String,
        producer: usize,
    },
}

/// A file in the run workspace, identified by its basename.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArtifactRef {
    filename: String,
    extension: Extension,
}

impl ArtifactRef {
    pub fn parse(filename: &str) -> Result<Self, PlanError> {
        if filename.contains(['/', '\\']) || filename.chars().any(char::is_control) {
            return Err(PlanError::SchemaError(format!(
                "`{filename}` must be a plain basename"
            )));
        }
        let mut parts = filename.split('.');
        let (stem, ext) = match (parts.next(), parts.next(), parts.next()) {
            (Some(stem), Some(ext), None) if !stem.is_empty() => (stem, ext),
            _ => return Err(PlanError::BadExtension(filename.to_string())),
        };
        debug_assert!(!stem.is_empty());
        let extension =
            Extension::from_token(ext).ok_or_else(|| PlanError::BadExtension(filename.to_string()))?;
        Ok(Self {
            filename: filename.to_string(),
            extension,
        })
    }

    pub fn filename(&self) -> &str {
        &self.filename
    }

    pub fn stem(&self) -> &str {
        self.filename
            .rsplit_once('.')
            .map(|(s, _)| s)
            .unwrap_or(&self.filename)
    }

    pub fn extension(&self) -> Extension {
        self.extension
    }

    pub fn modality(&self) -> Modality {
        self.extension.default_modality()
    }

    pub fn with_extension(&self, extension: Extension) -> Self {
        Self {
            filename: format!("{}.{}", self.stem(), extension),
            extension,
        }
    }
}

impl fmt::Display for ArtifactRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.filename)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepArgument {
    Literal(String),
    Reference(ArtifactRef),
}

impl StepArgument {
    pub fn reference(filename: &str) -> Result<Self, PlanError> {
        ArtifactRef::parse(filename).map(StepArgument::Reference)
    }

    pub fn literal(text: impl Into<String>) -> Self {
        StepArgument::Literal(text.into())
    }

    pub fn as_reference(&self) -> Option<&ArtifactRef> {
        match self {
            StepArgument::Reference(r) => Some(r),
            StepArgument::Literal(_) => None,
        }
    }
}

/// A bound parameter: one argument, or an ordered list for repeatable params.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Single(StepArgument),
    List(Vec<StepArgument>),
}

impl Binding {
    pub fn items(&self) -> &[StepArgument] {
        match self {
            Binding::Single(a) => std::slice::from_ref(a),
            Binding::List(items) => items,
        }
    }

    pub fn items_mut(&mut self) -> &mut [StepArgument] {
        match self {
            Binding::Single(a) => std::slice::from_mut(a),
            Binding::List(items) => items,
        }
    }

    pub fn references(&self) -> impl Iterator<Item = &ArtifactRef> {
        self.items().iter().filter_map(StepArgument::as_reference)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStep {
    pub index: usize,
    pub tool: String,
    pub args: BTreeMap<String, Binding>,
    pub output: ArtifactRef,
}

impl PlanStep {
    pub fn references(&self) -> impl Iterator<Item = &ArtifactRef> {
        self.args.values().flat_map(Binding::references)
    }

    pub fn literals(&self) -> impl Iterator<Item = &str> {
        self.args.values().flat_map(|b| {
            b.items().iter().filter_map(|a| match a {
                StepArgument::Literal(s) => Some(s.as_str()),
                StepArgument::Reference(_) => None,
            })
        })
    }

    pub fn consumes(&self, filename: &str) -> bool {
        self.references().any(|r| r.filename() == filename)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub query: String,
    pub task_type: TaskType,
    pub materials: Vec<ArtifactRef>,
    pub steps: Vec<PlanStep>,
}

// Wire structures. Field order is irrelevant: canonical output goes through
// `serde_json::Value`, whose maps are sorted.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    query: String,
    task_type: String,
    materials: Vec<String>,
    steps: Vec<RawStep>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    index: usize,
    tool: String,
    args: BTreeMap<String, RawBinding>,
    output: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawBinding {
    Single(RawArg),
    List(Vec<RawArg>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
enum RawArg {
    #[serde(rename = "literal")]
    Literal(String),
    #[serde(rename = "ref")]
    Ref(String),
}

fn convert_arg(raw: RawArg) -> Result<StepArgument, PlanError> {
    match raw {
        RawArg::Literal(s) => Ok(StepArgument::Literal(s)),
        RawArg::Ref(f) => StepArgument::reference(&f),
    }
}

fn raw_arg(arg: &StepArgument) -> RawArg {
    match arg {
        StepArgument::Literal(s) => RawArg::Literal(s.clone()),
        StepArgument::Reference(r) => RawArg::Ref(r.filename().to_string()),
    }
}

/// Parses a plan document: field presence, filename legality and uniqueness.
/// Semantic checks are left to [`type_check_plan`].
pub fn parse_plan(document: &Value) -> Result<Plan, PlanError> {
    let raw: RawPlan = serde_json::from_value(document.clone())
        .map_err(|e| PlanError::SchemaError(e.to_string()))?;
    let task_type = TaskType::from_code(&raw.task_type)
        .ok_or_else(|| PlanError::SchemaError(format!("unknown task_type `{}`", raw.task_type)))?;

    let mut names = BTreeSet::new();
    let mut materials = Vec::with_capacity(raw.materials.len());
    for m in &raw.materials {
        let r = ArtifactRef::parse(m)?;
        if !names.insert(r.filename().to_string()) {
            return Err(PlanError::DuplicateFilename(m.clone()));
        }
        materials.push(r);
    }

    let mut steps = Vec::with_capacity(raw.steps.len());
    for (position, raw_step) in raw.steps.into_iter().enumerate() {
        if raw_step.index != position {
            return Err(PlanError::SchemaError(format!(
                "step at position {position} has index {}",
                raw_step.index
            )));
        }
        let output = ArtifactRef::parse(&raw_step.output)?;
        if !names.insert(output.filename().to_string()) {
            return Err(PlanError::DuplicateFilename(raw_step.output));
        }
        let mut args = BTreeMap::new();
        for (param, binding) in raw_step.args {
            let binding = match binding {
                RawBinding::Single(a) => Binding::Single(convert_arg(a)?),
                RawBinding::List(items) => {
                    if items.is_empty() {
                        return Err(PlanError::SchemaError(format!(
                            "step {position}: list bound to `{param}` is empty"
                        )));
                    }
                    Binding::List(items.into_iter().map(convert_arg).collect::<Result<_, _>>()?)
                }
            };
            args.insert(param, binding);
        }
        steps.push(PlanStep {
            index: position,
            tool: raw_step.tool,
            args,
            output,
        });
    }

    Ok(Plan {
        query: raw.query,
        task_type,
        materials,
        steps,
    })
}

pub fn parse_plan_str(document: &str) -> Result<Plan, PlanError> {
    let value: Value =
        serde_json::from_str(document).map_err(|e| PlanError::SchemaError(e.to_string()))?;
    parse_plan(&value)
}

/// Canonical document form of a plan.
pub fn serialize_plan(plan: &Plan) -> Value {
    let raw = RawPlan {
        query: plan.query.clone(),
        task_type: plan.task_type.code().to_string(),
        materials: plan.materials.iter().map(|m| m.filename().to_string()).collect(),
        steps: plan
            .steps
            .iter()
            .map(|s| RawStep {
                index: s.index,
                tool: s.tool.clone(),
                args: s
                    .args
                    .iter()
                    .map(|(k, b)| {
                        let raw = match b {
                            Binding::Single(a) => RawBinding::Single(raw_arg(a)),
                            Binding::List(items) => RawBinding::List(items.iter().map(raw_arg).collect()),
                        };
                        (k.clone(), raw)
                    })
                    .collect(),
                output: s.output.filename().to_string(),
            })
            .collect(),
    };
    serde_json::to_value(raw).expect("plan serializes")
}

/// Canonical text: compact JSON with lexicographically sorted keys.
pub fn canonical_string(plan: &Plan) -> String {
    serialize_plan(plan).to_string()
}

impl Plan {
    pub fn new(query: impl Into<String>, task_type: TaskType, materials: Vec<ArtifactRef>) -> Self {
        Self {
            query: query.into(),
            task_type,
            materials,
            steps: Vec::new(),
        }
    }

    /// Short content-derived identifier.
    pub fn plan_id(&self) -> String {
        digest::sha256_hex(canonical_string(self).as_bytes())[..16].to_string()
    }

    pub fn is_material(&self, filename: &str) -> bool {
        self.materials.iter().any(|m| m.filename() == filename)
    }

    pub fn producer(&self, filename: &str) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.output.filename() == filename)
    }

    pub fn filenames(&self) -> BTreeSet<String> {
        self.materials
            .iter()
            .map(|m| m.filename().to_string())
            .chain(self.steps.iter().map(|s| s.output.filename().to_string()))
            .collect()
    }

    /// Step outputs that no later step consumes, in step order.
    pub fn final_outputs(&self) -> Vec<&ArtifactRef> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                !self.steps[i + 1..]
                    .iter()
                    .any(|later| later.consumes(s.output.filename()))
            })
            .map(|(_, s)| &s.output)
            .collect()
    }

    /// A filename with the given stem and extension not yet used in the plan.
    pub fn fresh_filename(&self, stem: &str, extension: Extension) -> ArtifactRef {
        let taken = self.filenames();
        let mut candidate = format!("{stem}.{extension}");
        let mut n = 2;
        while taken.contains(&candidate) {
            candidate = format!("{stem}_{n}.{extension}");
            n += 1;
        }
        ArtifactRef::parse(&candidate).expect("generated filename is valid")
    }

    /// Inserts a step at `position` and renumbers every step.
    pub fn insert_step(&mut self, position: usize, step: PlanStep) {
        self.steps.insert(position, step);
        self.reindex();
    }

    pub fn push_step(&mut self, tool: impl Into<String>, args: BTreeMap<String, Binding>, output: ArtifactRef) {
        let index = self.steps.len();
        self.steps.push(PlanStep {
            index,
            tool: tool.into(),
            args,
            output,
        });
    }

    pub fn reindex(&mut self) {
        for (i, s) in self.steps.iter_mut().enumerate() {
            s.index = i;
        }
    }

    /// Renames every reference to `from` in steps after `after` to `to`.
    pub fn rename_references(&mut self, after: usize, from: &str, to: &ArtifactRef) {
        for step in self.steps.iter_mut().skip(after + 1) {
            for binding in step.args.values_mut() {
                for arg in binding.items_mut() {
                    if let StepArgument::Reference(r) = arg {
                        if r.filename() == from {
                            *r = to.clone();
                        }
                    }
                }
            }
        }
    }
}

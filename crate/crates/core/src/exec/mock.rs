use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BoundValue, Outcome, Purpose, ToolBackend, ToolRequest};
use crate::digest::{hash_parts, unit_interval};
use crate::media;
use crate::modality::Extension;
use crate::text;

const MAX_DESCRIPTOR_WORDS: usize = 48;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    pub per_step_failure_prob: f64,
    pub seed: u64,
    /// Tools listed with `true` fail on every call.
    #[serde(default)]
    pub scripted: BTreeMap<String, bool>,
}

impl FailureModel {
    pub fn new(per_step_failure_prob: f64, seed: u64) -> Self {
        Self {
            per_step_failure_prob,
            seed,
            scripted: BTreeMap::new(),
        }
    }

    pub fn always_fail(mut self, tool: impl Into<String>) -> Self {
        self.scripted.insert(tool.into(), true);
        self
    }

    /// Pure function of the seed and the step identity.
    pub fn fails(&self, plan_id: &str, step_index: usize, tool: &str) -> bool {
        if self.scripted.get(tool).copied().unwrap_or(false) {
            return true;
        }
        let draw = unit_interval(hash_parts(&[
            &self.seed.to_le_bytes(),
            plan_id.as_bytes(),
            &(step_index as u64).to_le_bytes(),
            tool.as_bytes(),
        ]));
        draw < self.per_step_failure_prob
    }
}

/// Offline backend that fabricates placeholder artifacts and injects seeded
/// failures. Outputs carry the keywords of their literal and file inputs, so
/// content flows through the plan the way a real model chain would.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    model: FailureModel,
}

impl MockBackend {
    pub fn new(model: FailureModel) -> Self {
        Self { model }
    }

    pub fn failure_model(&self) -> &FailureModel {
        &self.model
    }
}

fn input_descriptor(value: &BoundValue, output: Extension, words: &mut Vec<String>) {
    match value {
        BoundValue::Literal(s) => words.extend(text::keywords(s)),
        BoundValue::Artifact { filename, bytes } => {
            let ext = filename
                .rsplit('.')
                .next()
                .and_then(Extension::from_token);
            let Some(ext) = ext else { return };
            // A soundtrack stays a separate stream inside a video.
            if output == Extension::Mp4 && ext == Extension::Mp3 {
                return;
            }
            if let Some(d) = media::describe(ext, bytes) {
                words.extend(text::keywords(&d));
            }
        }
        BoundValue::List(items) => {
            for item in items {
                input_descriptor(item, output, words);
            }
        }
    }
}

pub fn mock_descriptor(request: &ToolRequest<'_>) -> String {
    let output = request.spec.output.extension();
    let mut words = Vec::new();
    for value in request.args.values() {
        input_descriptor(value, output, &mut words);
    }
    let mut seen = std::collections::BTreeSet::new();
    words.retain(|w| seen.insert(w.clone()));
    words.truncate(MAX_DESCRIPTOR_WORDS);
    words.join(" ")
}

impl ToolBackend for MockBackend {
    fn execute(&self, request: &ToolRequest<'_>) -> Outcome {
        if request.purpose == Purpose::PlanStep
            && self
                .model
                .fails(request.plan_id, request.step_index, &request.spec.canonical_name())
        {
            return Outcome::Failed {
                reason: format!("{} failed (injected)", request.spec.model_name),
            };
        }
        let ext = request.spec.output.extension();
        Outcome::Produced {
            filename: request.output_filename.to_string(),
            bytes: media::placeholder(ext, &mock_descriptor(request)),
        }
    }
}

//! HTTP clients for remotely hosted tools, critics and scorers.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use ureq::Agent;

use crate::correction::{CriticClient, CriticError, CriticRequest};
use crate::exec::{BoundValue, Outcome, ToolBackend, ToolRequest};
use crate::metrics::{Channel, ScoreContext, Scorer, ScorerError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
const CRITIC_ATTEMPTS: usize = 3;

fn agent(timeout: Duration) -> Agent {
    Agent::new_with_config(
        Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build(),
    )
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{path}", base.trim_end_matches('/'))
}

/// POSTs `body` and decodes the JSON reply. Any non-2xx status is an error.
fn post_json<T: for<'de> Deserialize<'de>>(agent: &Agent, url: &str, body: &Value) -> Result<T, String> {
    let mut resp = agent.post(url).send_json(body).map_err(|e| e.to_string())?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(format!("HTTP {}: {}", status.as_u16(), text.trim()));
    }
    resp.body_mut().read_json::<T>().map_err(|e| format!("bad response body: {e}"))
}

fn wire_arg(value: &BoundValue) -> Value {
    match value {
        BoundValue::Literal(s) => json!({ "literal": s }),
        BoundValue::Artifact { filename, bytes } => json!({
            "artifact_b64": B64.encode(bytes),
            "filename": filename,
        }),
        BoundValue::List(items) => Value::Array(items.iter().map(wire_arg).collect()),
    }
}

/// Body of a `POST /execute` call.
pub fn execute_body(request: &ToolRequest<'_>) -> Value {
    let args: Map<String, Value> = request.args.iter().map(|(k, v)| (k.clone(), wire_arg(v))).collect();
    json!({
        "tool_name": request.spec.canonical_name(),
        "model_name": request.spec.model_name,
        "args": args,
        "output_filename": request.output_filename,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ExecuteReply {
    Ok { artifact_b64: String },
    Error { reason: String },
}

/// Tool backend that forwards every call to `POST <base>/execute`.
pub struct RemoteBackend {
    base: String,
    agent: Agent,
}

impl RemoteBackend {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base: base.into(),
            agent: agent(timeout),
        }
    }
}

impl ToolBackend for RemoteBackend {
    fn execute(&self, request: &ToolRequest<'_>) -> Outcome {
        let url = endpoint(&self.base, "execute");
        match post_json::<ExecuteReply>(&self.agent, &url, &execute_body(request)) {
            Ok(ExecuteReply::Ok { artifact_b64 }) => match B64.decode(artifact_b64.as_bytes()) {
                Ok(bytes) => Outcome::Produced {
                    filename: request.output_filename.to_string(),
                    bytes,
                },
                Err(e) => Outcome::Failed {
                    reason: format!("undecodable artifact: {e}"),
                },
            },
            Ok(ExecuteReply::Error { reason }) => Outcome::Failed { reason },
            Err(e) => Outcome::Failed {
                reason: format!("transport: {e}"),
            },
        }
    }
}

#[derive(Deserialize)]
struct ProposeReply {
    plan: Value,
}

/// Critic served at `POST <base>/propose`.
pub struct RemoteCritic {
    base: String,
    agent: Agent,
}

impl RemoteCritic {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base: base.into(),
            agent: agent(timeout),
        }
    }
}

impl CriticClient for RemoteCritic {
    fn propose(&self, request: &CriticRequest<'_>) -> Result<Value, CriticError> {
        let url = endpoint(&self.base, "propose");
        let body = request.to_wire();
        let mut last = String::new();
        for attempt in 1..=CRITIC_ATTEMPTS {
            match post_json::<ProposeReply>(&self.agent, &url, &body) {
                Ok(reply) => return Ok(reply.plan),
                Err(e) => {
                    log::warn!("{url} attempt {attempt}: {e}");
                    last = e;
                }
            }
        }
        Err(CriticError::Unavailable(last))
    }
}

/// Body of a `POST /score` call.
pub fn score_body(channel: Channel, ctx: &ScoreContext<'_>) -> Value {
    json!({
        "channel": channel.name(),
        "query": ctx.query,
        "text_context": ctx.text_context,
        "artifact_b64": ctx.artifact.map(|b| B64.encode(b)),
    })
}

#[derive(Deserialize)]
struct ScoreReply {
    score: f64,
}

/// Scorer served at `POST <base>/score`.
pub struct RemoteScorer {
    base: String,
    agent: Agent,
}

impl RemoteScorer {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base: base.into(),
            agent: agent(timeout),
        }
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, channel: Channel, ctx: &ScoreContext<'_>) -> Result<f64, ScorerError> {
        let url = endpoint(&self.base, "score");
        post_json::<ScoreReply>(&self.agent, &url, &score_body(channel, ctx))
            .map(|r| r.score)
            .map_err(ScorerError::Unavailable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_joins_paths() {
        assert_eq!(endpoint("http://h:1/", "execute"), "http://h:1/execute");
        assert_eq!(endpoint("http://h:1/api", "score"), "http://h:1/api/score");
    }

    #[test]
    fn reply_shapes() {
        let ok: ExecuteReply = serde_json::from_str(r#"{"status":"ok","artifact_b64":"aGk="}"#).unwrap();
        assert!(matches!(ok, ExecuteReply::Ok { .. }));
        let err: ExecuteReply = serde_json::from_str(r#"{"status":"error","reason":"unknown tool"}"#).unwrap();
        assert!(matches!(err, ExecuteReply::Error { reason } if reason == "unknown tool"));
        assert!(serde_json::from_str::<ExecuteReply>(r#"{"status":"maybe"}"#).is_err());
    }

    #[test]
    fn list_args_become_arrays() {
        let v = wire_arg(&BoundValue::List(vec![
            BoundValue::Literal("a".into()),
            BoundValue::Artifact {
                filename: "x.txt".into(),
                bytes: b"hi".to_vec().into(),
            },
        ]));
        assert_eq!(v, json!([{"literal": "a"}, {"artifact_b64": "aGk=", "filename": "x.txt"}]));
    }
}

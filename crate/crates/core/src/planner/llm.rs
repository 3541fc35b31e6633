//! Chat-style JSON client for LLM-assisted planning.
//!
//! Every reply is parsed against the shape its prompt template asks for;
//! failures are retried with exponential backoff and reported as distinct
//! error variants carrying the last raw response.

use std::collections::BTreeMap;
use std::thread::sleep;
use std::time::Duration;

use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::events::{EventPattern, EventSpec};
use super::scene::Activity;
use super::CrowdParams;

pub const ENV_ENDPOINT: &str = "CMG_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "CMG_LLM_API_KEY";
pub const ENV_MODEL: &str = "CMG_LLM_MODEL";

/// Number of candidate motion plans requested per scene.
pub const PLAN_CANDIDATES: usize = 3;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },

    #[error("LLM endpoint answered HTTP {status} after {attempts} attempt(s)")]
    Status { status: u16, body: String, attempts: usize },

    #[error("LLM reply violates the {template} schema after {attempts} attempt(s): {message}")]
    Schema {
        template: &'static str,
        message: String,
        raw: String,
        attempts: usize,
    },

    #[error("LLM transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: usize },

    #[error("no LLM endpoint configured (set {ENV_ENDPOINT})")]
    NotConfigured,
}

impl LlmError {
    /// Raw text of the last reply, when one was received.
    pub fn raw_response(&self) -> Option<&str> {
        match self {
            LlmError::Status { body, .. } => Some(body),
            LlmError::Schema { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    /// First retry delay; doubled on each further retry.
    pub backoff_ms: u64,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        LlmConfig {
            endpoint: endpoint.into(),
            api_key: None,
            model: "gpt-4".into(),
            timeout_ms: 30_000,
            max_retries: 2,
            backoff_ms: 500,
        }
    }

    /// Endpoint, key and model from the environment; `None` without an
    /// endpoint.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let mut cfg = LlmConfig::new(endpoint);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        if let Ok(m) = std::env::var(ENV_MODEL) {
            if !m.is_empty() {
                cfg.model = m;
            }
        }
        Some(cfg)
    }
}

/// Versioned prompt templates shipped with the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    SceneParams,
    MotionPlans,
    EventInterpretation,
}

const SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/system_v1.txt");

impl Template {
    pub fn id(self) -> &'static str {
        match self {
            Template::SceneParams => "scene_params_v1",
            Template::MotionPlans => "motion_plans_v1",
            Template::EventInterpretation => "event_v1",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Template::SceneParams => include_str!("../../assets/prompts/scene_params_v1.txt"),
            Template::MotionPlans => include_str!("../../assets/prompts/motion_plans_v1.txt"),
            Template::EventInterpretation => include_str!("../../assets/prompts/event_v1.txt"),
        }
    }

    /// Fills `{{name}}` placeholders.
    pub fn render(self, vars: &BTreeMap<&str, String>) -> String {
        let mut out = self.text().to_string();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out
    }
}

/// A validated reply and how many retries it took.
#[derive(Clone, Debug)]
pub struct LlmReply<T> {
    pub value: T,
    pub retries: usize,
    pub raw: String,
}

pub struct LlmClient {
    cfg: LlmConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Timeout,
    Status(u16, String),
    Schema(String, String),
    Transport(String),
}

/// Strips an optional Markdown code fence around a JSON reply.
fn unfence(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

impl LlmClient {
    pub fn new(cfg: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        LlmClient { cfg, agent }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    fn attempt<T: DeserializeOwned>(
        &self,
        body: &Value,
        check: &dyn Fn(&T) -> std::result::Result<(), String>,
    ) -> std::result::Result<(T, String), Attempt> {
        let mut req = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Timeout),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => return Err(Attempt::Timeout),
            Err(e) => return Err(Attempt::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Timeout),
            Err(e) => return Err(Attempt::Transport(e.to_string())),
        };
        if !(200..300).contains(&status) {
            return Err(Attempt::Status(status, text));
        }
        let envelope: Value = serde_json::from_str(&text).map_err(|e| Attempt::Schema(format!("reply is not JSON: {e}"), text.clone()))?;
        let content = envelope
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Attempt::Schema("reply lacks choices[0].message.content".into(), text.clone()))?;
        let value: T = serde_json::from_str(unfence(content))
            .map_err(|e| Attempt::Schema(format!("content does not match the schema: {e}"), content.to_string()))?;
        check(&value).map_err(|m| Attempt::Schema(m, content.to_string()))?;
        Ok((value, content.to_string()))
    }

    /// Sends one templated prompt and parses the reply as `T`, retrying on
    /// any failure up to `max_retries` times.
    pub fn request<T: DeserializeOwned>(
        &self,
        template: Template,
        vars: &BTreeMap<&str, String>,
        check: &dyn Fn(&T) -> std::result::Result<(), String>,
    ) -> std::result::Result<LlmReply<T>, LlmError> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT.trim()},
                {"role": "user", "content": template.render(vars)},
            ],
        });
        let attempts = self.cfg.max_retries + 1;
        let mut last = Attempt::Transport("no attempt made".into());
        for k in 0..attempts {
            if k > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (k - 1).min(16));
                sleep(Duration::from_millis(delay));
            }
            debug!("LLM request {} attempt {}", template.id(), k + 1);
            match self.attempt(&body, check) {
                Ok((value, raw)) => return Ok(LlmReply { value, retries: k, raw }),
                Err(a) => {
                    if let Attempt::Schema(m, _) = &a {
                        warn!("LLM {} reply rejected: {m}", template.id());
                    }
                    last = a;
                }
            }
        }
        Err(match last {
            Attempt::Timeout => LlmError::Timeout { attempts },
            Attempt::Status(status, body) => LlmError::Status { status, body, attempts },
            Attempt::Schema(message, raw) => LlmError::Schema {
                template: template.id(),
                message,
                raw,
                attempts,
            },
            Attempt::Transport(message) => LlmError::Transport { message, attempts },
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsReply {
    s: f64,
    sigma: f64,
    alpha: f64,
}

/// Crowd parameters for a scene, derived by the LLM.
pub fn derive_params(client: &LlmClient, scene: &str, n: usize) -> std::result::Result<(CrowdParams, usize), LlmError> {
    let vars = BTreeMap::from([("scene", scene.to_string()), ("n", n.to_string())]);
    let check = |r: &ParamsReply| {
        CrowdParams {
            n,
            s: r.s,
            sigma: r.sigma,
            alpha: r.alpha,
        }
        .validate()
        .map_err(|e| e.to_string())
    };
    let reply = client.request::<ParamsReply>(Template::SceneParams, &vars, &check)?;
    let r = reply.value;
    Ok((
        CrowdParams {
            n,
            s: r.s,
            sigma: r.sigma,
            alpha: r.alpha,
        },
        reply.retries,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub activity: String,
    pub text: String,
}

/// One proposed activity assignment for every group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub groups: Vec<CandidateGroup>,
}

#[derive(Deserialize)]
struct CandidatesReply {
    candidates: Vec<PlanCandidate>,
}

/// Candidate activity assignments for groups of the given sizes. Scoring
/// and selection happen in the planner.
pub fn motion_plan_candidates(
    client: &LlmClient,
    scene: &str,
    sizes: &[usize],
) -> std::result::Result<(Vec<PlanCandidate>, usize), LlmError> {
    let names: Vec<&str> = Activity::ALL.iter().map(|a| a.name()).collect();
    let vars = BTreeMap::from([
        ("scene", scene.to_string()),
        ("groups", sizes.len().to_string()),
        ("sizes", format!("{sizes:?}")),
        ("k", PLAN_CANDIDATES.to_string()),
        ("activities", names.join(", ")),
    ]);
    let check = |r: &CandidatesReply| {
        if r.candidates.is_empty() {
            Err("no candidates".to_string())
        } else {
            Ok(())
        }
    };
    let reply = client.request::<CandidatesReply>(Template::MotionPlans, &vars, &check)?;
    Ok((reply.value.candidates, reply.retries))
}

/// Pattern and parameters for a free-text event.
pub fn interpret_event(
    client: &LlmClient,
    event: &str,
    n: usize,
    frames: usize,
) -> std::result::Result<(EventSpec, usize), LlmError> {
    let names: Vec<&str> = EventPattern::ALL.iter().map(|p| p.name()).collect();
    let vars = BTreeMap::from([
        ("event", event.to_string()),
        ("n", n.to_string()),
        ("last_agent", n.saturating_sub(1).to_string()),
        ("frames", frames.to_string()),
        ("fps", "20".to_string()),
        ("patterns", names.join(", ")),
    ]);
    let check = |s: &EventSpec| s.validate(n, frames).map_err(|e| e.to_string());
    let reply = client.request::<EventSpec>(Template::EventInterpretation, &vars, &check)?;
    Ok((reply.value, reply.retries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_render_every_placeholder() {
        let vars = BTreeMap::from([("scene", "a park".to_string()), ("n", "4".to_string())]);
        let text = Template::SceneParams.render(&vars);
        assert!(text.contains("a park") && !text.contains("{{"));
    }

    #[test]
    fn strips_code_fences() {
        assert_eq!(unfence("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(unfence(" {\"a\":1} "), "{\"a\":1}");
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let mut cfg = LlmConfig::new("http://127.0.0.1:9/v1/chat/completions");
        cfg.max_retries = 1;
        cfg.backoff_ms = 1;
        cfg.timeout_ms = 2000;
        let err = derive_params(&LlmClient::new(cfg), "a park", 4).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 2, .. } | LlmError::Timeout { attempts: 2 }), "{err}");
    }
}

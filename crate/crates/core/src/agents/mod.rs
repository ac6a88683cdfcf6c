//! Proposal-generating agents.
//!
//! Orchestrators talk to an [`AgentPool`], which composes role prompts from
//! templates and forwards them to an [`AgentBackend`]. The backend is either
//! a chat-completion HTTP client or a deterministic script keyed by
//! `(round, source, attempt)`.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::patch::{render_proposal, Proposal};

pub use http::HttpBackend;
pub use scripted::{RecordedCall, ScriptBuilder, ScriptError, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Worker,
    Coordinator,
    Architect,
    Optimizer,
    Efficiency,
    Engineer,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Worker,
        Role::Coordinator,
        Role::Architect,
        Role::Optimizer,
        Role::Efficiency,
        Role::Engineer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Worker => "worker",
            Role::Coordinator => "coordinator",
            Role::Architect => "architect",
            Role::Optimizer => "optimizer",
            Role::Efficiency => "efficiency",
            Role::Engineer => "engineer",
        }
    }

    pub fn is_expert(self) -> bool {
        matches!(self, Role::Architect | Role::Optimizer | Role::Efficiency)
    }

    /// Name of the user-message template this role uses.
    pub fn template_kind(self) -> &'static str {
        match self {
            Role::Worker => "worker",
            Role::Coordinator => "coordinator",
            Role::Engineer => "engineer",
            _ => "expert",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one backend call: the round, the slot's label, and how many
/// times that label has already been called this round (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallKey {
    pub round: u32,
    pub source: String,
    pub attempt: u32,
}

impl CallKey {
    pub fn new(round: u32, source: impl Into<String>, attempt: u32) -> Self {
        Self {
            round,
            source: source.into(),
            attempt,
        }
    }
}

impl fmt::Display for CallKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.round, self.source, self.attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    /// Full reply, fed to the proposal parser as-is.
    pub raw_text: String,
    pub usage: Option<Usage>,
    pub latency_s: f64,
    /// Transport attempts spent, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("backend exhausted after {attempts} attempts: {last_error}")]
    BackendExhausted { attempts: u32, last_error: String },
    #[error("backend rejected the request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("script has no reply for {0}")]
    ScriptExhausted(CallKey),
    #[error("invalid agent request: {0}")]
    InvalidRequest(String),
    #[error("prompt template {path}: {source}")]
    Template {
        path: String,
        source: std::io::Error,
    },
}

impl AgentError {
    /// Errors that indicate a broken harness setup rather than a bad reply.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            AgentError::ScriptExhausted(_)
                | AgentError::InvalidRequest(_)
                | AgentError::Template { .. }
        )
    }
}

/// Something that turns a composed prompt into a reply.
pub trait AgentBackend: Send + Sync {
    fn complete(
        &self,
        key: &CallKey,
        role: Role,
        system: &str,
        user: &str,
    ) -> Result<AgentResponse, AgentError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AgentRequest {
    pub role: Option<Role>,
    pub code_context: String,
    pub memory_context: String,
    pub handoff_context: String,
    /// Candidate proposals for the coordinator, error log for the engineer.
    pub extra: String,
}

impl AgentRequest {
    pub fn new(role: Role, code_context: String, memory_context: String) -> Self {
        Self {
            role: Some(role),
            code_context,
            memory_context,
            ..Self::default()
        }
    }

    pub fn with_handoff(mut self, handoff: String) -> Self {
        self.handoff_context = handoff;
        self
    }

    pub fn with_extra(mut self, extra: String) -> Self {
        self.extra = extra;
        self
    }

    fn validate(&self) -> Result<Role, AgentError> {
        let role = self
            .role
            .ok_or_else(|| AgentError::InvalidRequest("request has no role".into()))?;
        if !self.handoff_context.is_empty() && !(role.is_expert() || role == Role::Engineer) {
            return Err(AgentError::InvalidRequest(format!(
                "{role} requests carry no handoff context"
            )));
        }
        if !self.extra.is_empty() && !matches!(role, Role::Coordinator | Role::Engineer) {
            return Err(AgentError::InvalidRequest(format!(
                "{role} requests carry no extra context"
            )));
        }
        Ok(role)
    }
}

/// System prompts per role plus user-message templates per template kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub system: BTreeMap<Role, String>,
    pub user: BTreeMap<String, String>,
}

const DEFAULT_SYSTEM: [(Role, &str); 6] = [
    (
        Role::Worker,
        include_str!("../../prompts/system/worker.txt"),
    ),
    (
        Role::Coordinator,
        include_str!("../../prompts/system/coordinator.txt"),
    ),
    (
        Role::Architect,
        include_str!("../../prompts/system/architect.txt"),
    ),
    (
        Role::Optimizer,
        include_str!("../../prompts/system/optimizer.txt"),
    ),
    (
        Role::Efficiency,
        include_str!("../../prompts/system/efficiency.txt"),
    ),
    (
        Role::Engineer,
        include_str!("../../prompts/system/engineer.txt"),
    ),
];

const DEFAULT_USER: [(&str, &str); 4] = [
    ("worker", include_str!("../../prompts/user/worker.txt")),
    (
        "coordinator",
        include_str!("../../prompts/user/coordinator.txt"),
    ),
    ("expert", include_str!("../../prompts/user/expert.txt")),
    ("engineer", include_str!("../../prompts/user/engineer.txt")),
];

impl Default for Prompts {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM
                .iter()
                .map(|(r, s)| (*r, s.to_string()))
                .collect(),
            user: DEFAULT_USER
                .iter()
                .map(|(k, s)| (k.to_string(), s.to_string()))
                .collect(),
        }
    }
}

impl Prompts {
    /// Defaults overlaid with `dir/system/<role>.txt` and `dir/user/<kind>.txt`
    /// where those files exist.
    pub fn load(dir: Option<&Path>) -> Result<Self, AgentError> {
        let mut prompts = Self::default();
        let Some(dir) = dir else {
            return Ok(prompts);
        };
        let read = |p: &Path| -> Result<Option<String>, AgentError> {
            match std::fs::read_to_string(p) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(AgentError::Template {
                    path: p.display().to_string(),
                    source,
                }),
            }
        };
        for role in Role::ALL {
            if let Some(s) = read(&dir.join("system").join(format!("{role}.txt")))? {
                prompts.system.insert(role, s);
            }
        }
        for (kind, _) in DEFAULT_USER {
            if let Some(s) = read(&dir.join("user").join(format!("{kind}.txt")))? {
                prompts.user.insert(kind.to_string(), s);
            }
        }
        Ok(prompts)
    }

    /// Writes every prompt to `dir` in the layout [`Prompts::load`] reads.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("system"))?;
        std::fs::create_dir_all(dir.join("user"))?;
        for (role, text) in &self.system {
            std::fs::write(dir.join("system").join(format!("{role}.txt")), text)?;
        }
        for (kind, text) in &self.user {
            std::fs::write(dir.join("user").join(format!("{kind}.txt")), text)?;
        }
        Ok(())
    }

    pub fn system_for(&self, role: Role) -> &str {
        self.system.get(&role).map_or("", String::as_str)
    }

    /// Composes the user message for `req` from its role's template.
    pub fn compose(&self, role: Role, req: &AgentRequest) -> String {
        let template = self
            .user
            .get(role.template_kind())
            .map_or("", String::as_str);
        fill_template(
            template,
            &[
                ("code", &req.code_context),
                ("memory", &req.memory_context),
                ("handoff", &req.handoff_context),
                ("candidates", &req.extra),
                ("error_log", &req.extra),
            ],
        )
    }
}

/// Single-pass `{name}` substitution; inserted text is never rescanned and
/// unknown placeholders are left as they are.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders candidates for the coordinator prompt.
pub fn render_candidates(candidates: &[(Proposal, f64)]) -> String {
    let mut out = String::new();
    for (i, (p, metric)) in candidates.iter().enumerate() {
        out.push_str(&format!(
            "### Candidate {} (val_bpb {metric:.4})\n{}\n",
            i + 1,
            render_proposal(p)
        ));
    }
    out
}

/// Backend plus prompts: the uniform entry point for every agent role.
#[derive(Clone)]
pub struct AgentPool {
    backend: Arc<dyn AgentBackend>,
    prompts: Prompts,
}

impl AgentPool {
    pub fn new(backend: Arc<dyn AgentBackend>, prompts: Prompts) -> Self {
        Self { backend, prompts }
    }

    pub fn prompts(&self) -> &Prompts {
        &self.prompts
    }

    pub fn propose(&self, key: &CallKey, req: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let role = req.validate()?;
        let user = self.prompts.compose(role, req);
        self.backend
            .complete(key, role, self.prompts.system_for(role), &user)
    }

    /// Asks the coordinator to merge at least two improving candidates.
    pub fn merge_candidates(
        &self,
        key: &CallKey,
        code_context: String,
        memory_context: String,
        candidates: &[(Proposal, f64)],
    ) -> Result<AgentResponse, AgentError> {
        if candidates.len() < 2 {
            return Err(AgentError::InvalidRequest(format!(
                "merge needs at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        let req = AgentRequest::new(Role::Coordinator, code_context, memory_context)
            .with_extra(render_candidates(candidates));
        self.propose(key, &req)
    }

    /// Asks the engineer for a conservative fix of a failed shared worktree.
    pub fn debug_fix(
        &self,
        key: &CallKey,
        error_log: &str,
        handoff: String,
        code_context: String,
    ) -> Result<AgentResponse, AgentError> {
        let req = AgentRequest::new(Role::Engineer, code_context, String::new())
            .with_handoff(handoff)
            .with_extra(error_log.to_string());
        self.propose(key, &req)
    }
}

//! Deterministic replies read from a script file.
//!
//! ```text
//! # comments and blank lines are allowed before the first section
//! [1.worker-1.1]
//! MOTIVATION: ...
//! [1.worker-2.1]
//! ...
//! ```
//!
//! Each `[round.source.attempt]` header starts a reply that runs verbatim up
//! to the next header. Lookups are keyed, so concurrent callers cannot change
//! which reply they receive.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use regex::Regex;

use super::{AgentBackend, AgentError, AgentResponse, CallKey, Role};

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("reading script {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("script line {line}: text before the first [round.source.attempt] header")]
    StrayText { line: usize },
    #[error("script line {line}: duplicate section [{key}]")]
    Duplicate { line: usize, key: CallKey },
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\[(\d+)\.([A-Za-z0-9_-]+)\.(\d+)\]\s*$").unwrap())
}

fn parse_header(line: &str) -> Option<CallKey> {
    let caps = header_re().captures(line)?;
    Some(CallKey {
        round: caps[1].parse().ok()?,
        source: caps[2].to_string(),
        attempt: caps[3].parse().ok()?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedCall {
    pub key: CallKey,
    pub role: Role,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    replies: BTreeMap<CallKey, String>,
    calls: Mutex<Vec<RecordedCall>>,
}

impl ScriptedBackend {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut replies = BTreeMap::new();
        let mut current: Option<(CallKey, usize, String)> = None;
        for (idx, line) in text.split_inclusive('\n').enumerate() {
            let bare = line.trim_end_matches(['\n', '\r']);
            if let Some(key) = parse_header(bare) {
                if let Some((k, l, body)) = current.take() {
                    insert(&mut replies, k, l, body)?;
                }
                current = Some((key, idx + 1, String::new()));
                continue;
            }
            match current.as_mut() {
                Some((_, _, body)) => body.push_str(line),
                None if bare.trim().is_empty() || bare.starts_with('#') => {}
                None => return Err(ScriptError::StrayText { line: idx + 1 }),
            }
        }
        if let Some((k, l, body)) = current {
            insert(&mut replies, k, l, body)?;
        }
        Ok(Self {
            replies,
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &CallKey> {
        self.replies.keys()
    }

    /// Every call served so far, in arrival order.
    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().unwrap().clone()
    }
}

fn insert(
    replies: &mut BTreeMap<CallKey, String>,
    key: CallKey,
    line: usize,
    body: String,
) -> Result<(), ScriptError> {
    if replies.contains_key(&key) {
        return Err(ScriptError::Duplicate { line, key });
    }
    replies.insert(key, body);
    Ok(())
}

impl AgentBackend for ScriptedBackend {
    fn complete(
        &self,
        key: &CallKey,
        role: Role,
        system: &str,
        user: &str,
    ) -> Result<AgentResponse, AgentError> {
        self.calls.lock().unwrap().push(RecordedCall {
            key: key.clone(),
            role,
            system: system.to_string(),
            user: user.to_string(),
        });
        let reply = self
            .replies
            .get(key)
            .ok_or_else(|| AgentError::ScriptExhausted(key.clone()))?;
        Ok(AgentResponse {
            raw_text: reply.clone(),
            usage: None,
            latency_s: 0.0,
            attempts: 1,
        })
    }
}

/// Assembles script text programmatically.
#[derive(Debug, Default, Clone)]
pub struct ScriptBuilder {
    text: String,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reply(mut self, round: u32, source: &str, attempt: u32, body: &str) -> Self {
        self.text
            .push_str(&format!("[{round}.{source}.{attempt}]\n{body}"));
        if !body.ends_with('\n') {
            self.text.push('\n');
        }
        self
    }

    pub fn build(self) -> String {
        self.text
    }
}

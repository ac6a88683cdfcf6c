//! Chat-completion HTTP backend.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{AgentBackend, AgentError, AgentResponse, CallKey, Role, Usage};
use crate::config::AgentsConfig;

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    settings: AgentsConfig,
    seed: u64,
}

enum Failure {
    Retryable(String),
    Fatal(AgentError),
}

impl HttpBackend {
    /// Builds a client for `<base_url>/chat/completions`; the bearer token is
    /// read from the environment variable named in the config, if set.
    pub fn new(settings: &AgentsConfig, seed: u64) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.request_timeout_s.max(1)))
            .build()
            .map_err(|e| AgentError::MalformedResponse(format!("building HTTP client: {e}")))?;
        let api_key = std::env::var(&settings.api_key_env).ok();
        if api_key.is_none() {
            log::warn!(
                "{} is not set; sending requests without authorization",
                settings.api_key_env
            );
        }
        Ok(Self {
            client,
            endpoint: format!(
                "{}/chat/completions",
                settings.base_url.trim_end_matches('/')
            ),
            api_key,
            settings: settings.clone(),
            seed,
        })
    }

    fn attempt(&self, body: &Value) -> Result<(String, Option<Usage>), Failure> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Failure::Retryable(format!("reading body: {e}")))?;
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(AgentError::Rejected {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            }));
        }
        parse_completion(&text).map_err(Failure::Fatal)
    }
}

fn parse_completion(text: &str) -> Result<(String, Option<Usage>), AgentError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| AgentError::MalformedResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| AgentError::MalformedResponse("no choices[0].message.content".into()))?;
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u
            .get("completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    });
    Ok((content.to_string(), usage))
}

impl AgentBackend for HttpBackend {
    fn complete(
        &self,
        key: &CallKey,
        role: Role,
        system: &str,
        user: &str,
    ) -> Result<AgentResponse, AgentError> {
        let body = json!({
            "model": self.settings.model_for(role),
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.settings.temperature,
            "seed": self.seed,
        });
        let max_attempts = self.settings.max_attempts.max(1);
        let start = Instant::now();
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            match self.attempt(&body) {
                Ok((raw_text, usage)) => {
                    return Ok(AgentResponse {
                        raw_text,
                        usage,
                        latency_s: start.elapsed().as_secs_f64(),
                        attempts: attempt,
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) => {
                    log::warn!("{key} ({role}) attempt {attempt}/{max_attempts} failed: {e}");
                    last_error = e;
                    if attempt < max_attempts {
                        let backoff = self.settings.backoff_base_ms << (attempt - 1).min(16);
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
            }
        }
        Err(AgentError::BackendExhausted {
            attempts: max_attempts,
            last_error,
        })
    }
}

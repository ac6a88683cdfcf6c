//! Run configuration.
//!
//! One TOML file describes a whole run. Every value can be overridden with a
//! dotted key such as `budget.t_max_s=600`; the CLI exposes these as
//! `--budget.t_max_s 600`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::agents::Role;

pub const DEFAULT_METRIC_PATTERN: &str = r"val_bpb[:=]\s*([0-9.]+)";

pub const DEFAULT_DENYLIST: &[&str] = &[
    r"\brm\s+-[a-zA-Z]*r[a-zA-Z]*f",
    r"shutil\.rmtree",
    r"os\.(remove|unlink|rmdir|removedirs)\s*\(",
    r"\b(requests|httpx)\.(get|post|put|delete)\s*\(",
    r"urllib\.request",
    r"\b(curl|wget)\s",
    r"\bgit\s+(push|commit|reset|checkout|clean|rebase)\b",
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("bad override `{0}`: expected key=value with a dotted key")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Single,
    Subagent,
    Team,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Single => "single",
            Topology::Subagent => "subagent",
            Topology::Team => "team",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Topology {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Topology::Single),
            "subagent" => Ok(Topology::Subagent),
            "team" => Ok(Topology::Team),
            other => Err(ConfigError::Invalid(format!("unknown topology `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory name under `out_dir`; generated from the start time when absent.
    pub run_id: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub repo: RepoConfig,
    pub budget: BudgetConfig,
    pub topology: TopologyConfig,
    pub agents: AgentsConfig,
    pub execution: ExecutionConfig,
    pub memory: MemoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            repo: RepoConfig::default(),
            budget: BudgetConfig::default(),
            topology: TopologyConfig::default(),
            agents: AgentsConfig::default(),
            execution: ExecutionConfig::default(),
            memory: MemoryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepoConfig {
    pub path: PathBuf,
    pub main_branch: String,
    /// Worktree root; defaults to `<repo parent>/.<repo name>-worktrees`.
    pub scratch_dir: Option<PathBuf>,
    /// Files whose contents are shown to agents as the code context.
    pub target_files: Vec<String>,
}

impl Default for RepoConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("."),
            main_branch: "main".into(),
            scratch_dir: None,
            target_files: vec!["train.py".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub t_max_s: u64,
    pub min_round_margin_s: u64,
    pub max_rounds: Option<u32>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            t_max_s: 300,
            min_round_margin_s: 0,
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: Topology,
    /// Parallel workers per subagent round.
    pub k: usize,
    /// Expert slots per team round.
    pub turns: usize,
    /// Expert roles cycled in order across the team turns.
    pub roles: Vec<Role>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            kind: Topology::Single,
            k: 3,
            turns: 6,
            roles: vec![Role::Architect, Role::Optimizer, Role::Efficiency],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub model: String,
    /// Per-role model overrides keyed by role name.
    pub models: BTreeMap<String, String>,
    pub temperature: f64,
    pub request_timeout_s: u64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    /// Directory holding `system/<role>.txt` and `user/<kind>.txt` overrides.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        let models = [("coordinator", "glm-4.7"), ("engineer", "glm-4.7")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            backend: BackendKind::Http,
            script: None,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "AUTORESEARCH_API_KEY".into(),
            model: "glm-4.6v".into(),
            models,
            temperature: 0.7,
            request_timeout_s: 300,
            max_attempts: 3,
            backoff_base_ms: 1000,
            prompt_dir: None,
        }
    }
}

impl AgentsConfig {
    pub fn model_for(&self, role: Role) -> &str {
        self.models
            .get(role.as_str())
            .map(String::as_str)
            .unwrap_or(&self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Compile check run inside the worktree; empty skips the stage.
    pub preflight_command: Vec<String>,
    pub preflight_timeout_s: f64,
    pub eval_command: Vec<String>,
    pub eval_timeout_s: f64,
    pub metric_pattern: String,
    pub denylist_patterns: Vec<String>,
    pub log_excerpt_lines: usize,
    /// Concurrent evaluations allowed; defaults to `topology.k`.
    pub eval_permits: Option<usize>,
    /// Environment variables passed through to child processes besides PATH.
    pub env_passthrough: Vec<String>,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            preflight_command: vec![
                "python3".into(),
                "-m".into(),
                "py_compile".into(),
                "train.py".into(),
            ],
            preflight_timeout_s: 60.0,
            eval_command: vec!["python3".into(), "train.py".into()],
            eval_timeout_s: 120.0,
            metric_pattern: DEFAULT_METRIC_PATTERN.into(),
            denylist_patterns: DEFAULT_DENYLIST.iter().map(|s| s.to_string()).collect(),
            log_excerpt_lines: 50,
            eval_permits: None,
            env_passthrough: vec!["HOME".into(), "LANG".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Most recent entries shown to agents.
    pub context_limit: usize,
    /// Character budget for the rendered entries.
    pub char_budget: usize,
    pub seed_exp: Option<PathBuf>,
    pub seed_meta: Option<PathBuf>,
    /// Also log evaluated-but-crashed proposals as `Crash` entries.
    pub record_crashes: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            context_limit: 20,
            char_budget: 4000,
            seed_exp: None,
            seed_meta: None,
            record_crashes: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Loads `path` (or defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let mut value: toml::Value = if text.trim().is_empty() {
            toml::Value::try_from(RunConfig::default())?
        } else {
            let parsed: RunConfig = toml::from_str(&text)?;
            toml::Value::try_from(parsed)?
        };
        for (key, raw) in overrides {
            set_dotted(&mut value, key, raw)?;
        }
        Ok(value.try_into()?)
    }

    pub fn eval_permits(&self) -> usize {
        self.execution
            .eval_permits
            .unwrap_or(self.topology.k)
            .max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.topology.k == 0 {
            return invalid("topology.k must be at least 1".into());
        }
        if self.topology.kind == Topology::Team {
            if self.topology.turns == 0 {
                return invalid("topology.turns must be at least 1".into());
            }
            if self.topology.roles.is_empty() {
                return invalid("topology.roles must not be empty".into());
            }
        }
        if let Some(bad) = self.topology.roles.iter().find(|r| !r.is_expert()) {
            return invalid(format!("topology.roles: `{bad}` is not an expert role"));
        }
        if self.execution.eval_command.is_empty() {
            return invalid("execution.eval_command must not be empty".into());
        }
        if self.execution.eval_timeout_s.is_nan() || self.execution.eval_timeout_s <= 0.0 {
            return invalid("execution.eval_timeout_s must be positive".into());
        }
        match Regex::new(&self.execution.metric_pattern) {
            Ok(re) if re.captures_len() >= 2 => {}
            Ok(_) => return invalid("execution.metric_pattern needs one capture group".into()),
            Err(e) => return invalid(format!("execution.metric_pattern: {e}")),
        }
        for pat in &self.execution.denylist_patterns {
            if let Err(e) = Regex::new(pat) {
                return invalid(format!("execution.denylist_patterns `{pat}`: {e}"));
            }
        }
        if self.agents.backend == BackendKind::Scripted && self.agents.script.is_none() {
            return invalid("agents.script is required for the scripted backend".into());
        }
        if self.repo.target_files.is_empty() {
            return invalid("repo.target_files must not be empty".into());
        }
        Ok(())
    }
}

/// Parses `key=value` into a pair.
pub fn parse_override(arg: &str) -> Result<(String, String), ConfigError> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(ConfigError::BadOverride(arg.to_string())),
    }
}

// Optional string or path fields; absent from the serialized defaults.
const OPTIONAL_STRING_KEYS: [&str; 6] = [
    "run_id",
    "repo.scratch_dir",
    "agents.script",
    "agents.prompt_dir",
    "memory.seed_exp",
    "memory.seed_meta",
];

/// Interprets `raw` as a TOML value, falling back to a plain string.
fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(format!("{key}={raw}")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{key}={raw}")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| ConfigError::BadOverride(format!("{key}={raw}")))?;
    let leaf = parts[parts.len() - 1].to_string();
    // keep string-typed fields as strings even when the text looks numeric
    let value = match table.get(&leaf) {
        Some(toml::Value::String(_)) => toml::Value::String(raw.to_string()),
        None if OPTIONAL_STRING_KEYS.contains(&key) => toml::Value::String(raw.to_string()),
        _ => parse_scalar(raw),
    };
    table.insert(leaf, value);
    Ok(())
}

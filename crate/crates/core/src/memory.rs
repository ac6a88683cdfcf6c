//! Explicit experience memory (`program_exp.md`) and team meta-memory
//! (`program_meta.md`).
//!
//! Both are append-only markdown files with one bullet per record:
//!
//! ```text
//! - [round 3][subagent][worker-2][Success] val_bpb 1.3500→1.3000 :: lower the learning rate
//! ```

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::Topology;

pub const EXPERIENCE_FILE: &str = "program_exp.md";
pub const META_FILE: &str = "program_meta.md";
const ENTRY_PREFIX: &str = "- [round ";

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("memory storage {path}: {source}")]
    Storage {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid memory record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Experience,
    Meta,
}

impl MemoryKind {
    pub fn file_name(self) -> &'static str {
        match self {
            MemoryKind::Experience => EXPERIENCE_FILE,
            MemoryKind::Meta => META_FILE,
        }
    }

    fn title(self) -> &'static str {
        match self {
            MemoryKind::Experience => "Experience memory",
            MemoryKind::Meta => "Team meta-memory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failed,
    Crash,
    UnresolvableCrash,
    EffectiveCollaboration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "Success",
            Outcome::Failed => "Failed",
            Outcome::Crash => "Crash",
            Outcome::UnresolvableCrash => "Unresolvable crash",
            Outcome::EffectiveCollaboration => "Effective collaboration",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub round: u32,
    pub topology: Topology,
    pub source: String,
    pub idea_summary: String,
    pub outcome: Outcome,
    pub metric_before: Option<f64>,
    pub metric_after: Option<f64>,
    pub timestamp: DateTime<Utc>,
}

impl ExperienceRecord {
    pub fn validate(&self) -> Result<(), MemoryError> {
        let bad = |m: &str| Err(MemoryError::InvalidRecord(m.to_string()));
        if self.round == 0 {
            return bad("round must be at least 1");
        }
        if self.outcome == Outcome::Success {
            match (self.metric_before, self.metric_after) {
                (Some(b), Some(a)) if a < b => {}
                _ => return bad("Success needs metric_after < metric_before"),
            }
        }
        if matches!(
            self.outcome,
            Outcome::UnresolvableCrash | Outcome::EffectiveCollaboration
        ) && self.topology != Topology::Team
        {
            return bad("team-only outcome outside team topology");
        }
        Ok(())
    }

    /// Single-line markdown bullet; stable for identical field values.
    pub fn render(&self) -> String {
        let metric = |m: Option<f64>| m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let idea = self
            .idea_summary
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "{ENTRY_PREFIX}{}][{}][{}][{}] val_bpb {}→{} :: {}",
            self.round,
            self.topology,
            self.source,
            self.outcome,
            metric(self.metric_before),
            metric(self.metric_after),
            idea
        )
    }
}

/// An append-only memory document. Appends from concurrent callers are
/// serialized so entries never interleave.
#[derive(Debug)]
pub struct MemoryFile {
    path: PathBuf,
    kind: MemoryKind,
    writer: Mutex<()>,
}

impl MemoryFile {
    /// Opens `dir/<kind file>`, creating it (optionally seeded from a prior
    /// run's file) when missing.
    pub fn create(dir: &Path, kind: MemoryKind, seed: Option<&Path>) -> Result<Self, MemoryError> {
        let path = dir.join(kind.file_name());
        let storage = |source| MemoryError::Storage {
            path: path.clone(),
            source,
        };
        if !path.exists() {
            std::fs::create_dir_all(dir).map_err(storage)?;
            let initial = match seed {
                Some(s) => std::fs::read_to_string(s).map_err(|source| MemoryError::Storage {
                    path: s.to_path_buf(),
                    source,
                })?,
                None => format!("# {}\n\n", kind.title()),
            };
            std::fs::write(&path, initial).map_err(storage)?;
        }
        Ok(Self {
            path,
            kind,
            writer: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    pub fn record(&self, rec: &ExperienceRecord) -> Result<(), MemoryError> {
        rec.validate()?;
        let mut line = rec.render();
        line.push('\n');
        let _guard = self.writer.lock().unwrap();
        let storage = |source| MemoryError::Storage {
            path: self.path.clone(),
            source,
        };
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(storage)?;
        f.write_all(line.as_bytes()).map_err(storage)?;
        f.flush().map_err(storage)
    }

    /// Entry lines in chronological order.
    pub fn entries(&self) -> Result<Vec<String>, MemoryError> {
        let text = std::fs::read_to_string(&self.path).map_err(|source| MemoryError::Storage {
            path: self.path.clone(),
            source,
        })?;
        Ok(text
            .lines()
            .filter(|l| l.starts_with(ENTRY_PREFIX))
            .map(str::to_string)
            .collect())
    }

    /// The most recent `limit` entries, newest last, trimmed to `char_budget`.
    pub fn render_context(&self, limit: usize, char_budget: usize) -> Result<String, MemoryError> {
        let entries = self.entries()?;
        Ok(render_block(self.kind, &entries, limit, char_budget))
    }
}

/// Suffix of `entries` kept for a prompt: at most `limit` entries whose
/// lengths (plus one newline each) fit in `char_budget`, dropping oldest first.
pub fn select_entries(entries: &[String], limit: usize, char_budget: usize) -> &[String] {
    let recent = &entries[entries.len().saturating_sub(limit)..];
    let mut used = 0;
    let mut keep = 0;
    for entry in recent.iter().rev() {
        let cost = entry.chars().count() + 1;
        if used + cost > char_budget {
            break;
        }
        used += cost;
        keep += 1;
    }
    &recent[recent.len() - keep..]
}

pub fn render_block(
    kind: MemoryKind,
    entries: &[String],
    limit: usize,
    char_budget: usize,
) -> String {
    let mut out = format!("## {} ({})\n", kind.title(), kind.file_name());
    for e in select_entries(entries, limit, char_budget) {
        out.push_str(e);
        out.push('\n');
    }
    out
}

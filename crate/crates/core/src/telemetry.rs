//! Lifecycle telemetry.
//!
//! Every proposal lands in exactly one of four states. Runs write an
//! append-only JSON Lines log (`events.jsonl`) from which the state table,
//! the progress series and the promotion chain are rebuilt offline.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Topology};
use crate::exec::{EvalOutcome, PreflightReport};
use crate::patch::Edit;
use crate::repo::{CommitId, RepoError, RepoHandle, TreeHash};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const STATES_CSV: &str = "report.csv";
pub const PROGRESS_CSV: &str = "progress.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("telemetry storage {path}: {source}")]
    Storage {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed event log at line {line}: {detail}")]
    MalformedLog { line: usize, detail: String },
    #[error("event violates its invariants: {0}")]
    InvalidEvent(String),
    #[error("serializing: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LifecycleState {
    ProposalFailure,
    PreflightFailure,
    TrainingCrash,
    TrainingSuccess,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 4] = [
        LifecycleState::ProposalFailure,
        LifecycleState::PreflightFailure,
        LifecycleState::TrainingCrash,
        LifecycleState::TrainingSuccess,
    ];
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Classifies a proposal by the first pipeline stage it failed.
///
/// A missing later stage after a passed earlier one counts as a failure of
/// that stage.
pub fn classify<T, E>(
    parse: &Result<T, E>,
    preflight: Option<&PreflightReport>,
    eval: Option<&EvalOutcome>,
) -> LifecycleState {
    if parse.is_err() {
        return LifecycleState::ProposalFailure;
    }
    match preflight {
        Some(p) if p.passed => {}
        _ => return LifecycleState::PreflightFailure,
    }
    match eval {
        Some(e) if e.is_success() => LifecycleState::TrainingSuccess,
        _ => LifecycleState::TrainingCrash,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryEvent {
    pub run_id: String,
    pub round: u32,
    pub topology: Topology,
    pub source: String,
    pub state: LifecycleState,
    /// Present exactly when `state` is `TrainingSuccess`.
    pub metric: Option<f64>,
    pub baseline_metric: f64,
    pub duration_s: f64,
    pub timestamp: DateTime<Utc>,
    pub idea_summary: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionRecord {
    pub run_id: String,
    pub round: u32,
    pub source: String,
    pub commit: CommitId,
    pub tree: TreeHash,
    pub message: String,
    pub idea_summary: String,
    pub metric_before: f64,
    pub metric_after: f64,
    /// Every edit applied to the promoted worktree, in order.
    pub edits: Vec<Edit>,
    pub timestamp: DateTime<Utc>,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    RunStart {
        run_id: String,
        topology: Topology,
        baseline_metric: f64,
        initial_commit: CommitId,
        initial_tree: TreeHash,
        timestamp: DateTime<Utc>,
    },
    RoundStart {
        run_id: String,
        round: u32,
        elapsed_s: f64,
        timestamp: DateTime<Utc>,
    },
    Proposal(TelemetryEvent),
    Promotion(PromotionRecord),
    RoundEnd {
        run_id: String,
        round: u32,
        elapsed_s: f64,
        best_metric: f64,
        promoted: bool,
        timestamp: DateTime<Utc>,
    },
    RunEnd {
        run_id: String,
        final_metric: f64,
        final_commit: CommitId,
        final_tree: TreeHash,
        rounds_executed: u32,
        timestamp: DateTime<Utc>,
    },
}

impl LogRecord {
    fn validate(&self) -> Result<(), TelemetryError> {
        if let LogRecord::Proposal(e) = self {
            let success = e.state == LifecycleState::TrainingSuccess;
            if success != e.metric.is_some() {
                return Err(TelemetryError::InvalidEvent(format!(
                    "{} event from {} {} a metric",
                    e.state,
                    e.source,
                    if success { "lacks" } else { "carries" }
                )));
            }
        }
        Ok(())
    }
}

/// Serialized, flush-on-write JSON Lines appender.
#[derive(Debug)]
pub struct EventSink {
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl EventSink {
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| TelemetryError::Storage {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn emit(&self, record: &LogRecord) -> Result<(), TelemetryError> {
        record.validate()?;
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        let storage = |source| TelemetryError::Storage {
            path: self.path.clone(),
            source,
        };
        file.write_all(line.as_bytes()).map_err(storage)?;
        file.flush().map_err(storage)
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, TelemetryError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TelemetryError::MalformedLog {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TelemetryError> {
    let text = std::fs::read_to_string(path).map_err(|source| TelemetryError::Storage {
        path: path.to_path_buf(),
        source,
    })?;
    parse_log(&text)
}

/// Drops timestamps and durations so two runs of the same scripted
/// configuration can be compared byte for byte.
pub fn normalize_log(text: &str) -> Result<String, TelemetryError> {
    const VOLATILE: [&str; 3] = ["timestamp", "duration_s", "elapsed_s"];
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| TelemetryError::MalformedLog {
                line: i + 1,
                detail: e.to_string(),
            })?;
        if let Some(obj) = v.as_object_mut() {
            for k in VOLATILE {
                obj.remove(k);
            }
        }
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub round: u32,
    pub elapsed_s: f64,
    pub best_metric: f64,
    /// Baseline minus best so far; positive is improvement.
    pub delta_val_bpb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub round: u32,
    pub source: String,
    pub commit: CommitId,
    pub tree: TreeHash,
    pub message: String,
    pub idea_summary: String,
    pub edits: Vec<Edit>,
}

impl From<&PromotionRecord> for ChainEntry {
    fn from(p: &PromotionRecord) -> Self {
        Self {
            round: p.round,
            source: p.source.clone(),
            commit: p.commit.clone(),
            tree: p.tree.clone(),
            message: p.message.clone(),
            idea_summary: p.idea_summary.clone(),
            edits: p.edits.clone(),
        }
    }
}

/// Tables rebuilt from an event log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTables {
    pub state_counts: BTreeMap<LifecycleState, usize>,
    pub progress: Vec<ProgressPoint>,
    pub promotions: Vec<ChainEntry>,
    pub rounds_executed: u32,
}

impl RunTables {
    pub fn total_proposals(&self) -> usize {
        self.state_counts.values().sum()
    }

    /// Share of proposals per state; empty when there were no proposals.
    pub fn ratios(&self) -> BTreeMap<LifecycleState, f64> {
        let total = self.total_proposals();
        if total == 0 {
            return BTreeMap::new();
        }
        LifecycleState::ALL
            .iter()
            .map(|s| {
                let n = self.state_counts.get(s).copied().unwrap_or(0);
                (*s, n as f64 / total as f64)
            })
            .collect()
    }

    pub fn states_csv(&self) -> String {
        let ratios = self.ratios();
        let mut out = String::from("state,count,ratio\n");
        for s in LifecycleState::ALL {
            let n = self.state_counts.get(&s).copied().unwrap_or(0);
            let r = ratios.get(&s).copied().unwrap_or(0.0);
            out.push_str(&format!("{s},{n},{r:.6}\n"));
        }
        out
    }

    pub fn progress_csv(&self) -> String {
        let mut out = String::from("round,elapsed_s,best_metric,delta_val_bpb\n");
        for p in &self.progress {
            out.push_str(&format!(
                "{},{:.3},{:.6},{:.6}\n",
                p.round, p.elapsed_s, p.best_metric, p.delta_val_bpb
            ));
        }
        out
    }
}

pub fn aggregate(records: &[LogRecord]) -> RunTables {
    let mut tables = RunTables::default();
    let mut baseline = None;
    for record in records {
        match record {
            LogRecord::RunStart {
                baseline_metric, ..
            } => {
                baseline = Some(*baseline_metric);
                tables.progress.push(ProgressPoint {
                    round: 0,
                    elapsed_s: 0.0,
                    best_metric: *baseline_metric,
                    delta_val_bpb: 0.0,
                });
            }
            LogRecord::Proposal(e) => *tables.state_counts.entry(e.state).or_default() += 1,
            LogRecord::Promotion(p) => tables.promotions.push(p.into()),
            LogRecord::RoundEnd {
                round,
                elapsed_s,
                best_metric,
                ..
            } => {
                tables.rounds_executed += 1;
                let base = baseline.unwrap_or(*best_metric);
                tables.progress.push(ProgressPoint {
                    round: *round,
                    elapsed_s: *elapsed_s,
                    best_metric: *best_metric,
                    delta_val_bpb: base - best_metric,
                });
            }
            LogRecord::RoundStart { .. } | LogRecord::RunEnd { .. } => {}
        }
    }
    tables
}

/// Final summary of a run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: RunConfig,
    pub topology: Topology,
    pub baseline_metric: f64,
    pub final_metric: f64,
    /// `baseline_metric - final_metric`; positive is improvement.
    pub delta_val_bpb: f64,
    pub rounds_executed: u32,
    pub promotions: usize,
    pub state_counts: BTreeMap<LifecycleState, usize>,
    pub initial_commit: CommitId,
    pub initial_tree: TreeHash,
    pub final_commit: CommitId,
    pub final_tree: TreeHash,
    pub accepted_patch_chain: Vec<ChainEntry>,
}

impl RunReport {
    /// Builds the report from a complete run log.
    pub fn from_log(config: RunConfig, records: &[LogRecord]) -> Result<Self, TelemetryError> {
        let missing = |what: &str| TelemetryError::MalformedLog {
            line: 0,
            detail: format!("log has no {what} record"),
        };
        let (run_id, topology, baseline_metric, initial_commit, initial_tree) = records
            .iter()
            .find_map(|r| match r {
                LogRecord::RunStart {
                    run_id,
                    topology,
                    baseline_metric,
                    initial_commit,
                    initial_tree,
                    ..
                } => Some((
                    run_id.clone(),
                    *topology,
                    *baseline_metric,
                    initial_commit.clone(),
                    initial_tree.clone(),
                )),
                _ => None,
            })
            .ok_or_else(|| missing("run_start"))?;
        let (final_metric, final_commit, final_tree) = records
            .iter()
            .rev()
            .find_map(|r| match r {
                LogRecord::RunEnd {
                    final_metric,
                    final_commit,
                    final_tree,
                    ..
                } => Some((*final_metric, final_commit.clone(), final_tree.clone())),
                _ => None,
            })
            .ok_or_else(|| missing("run_end"))?;
        let tables = aggregate(records);
        Ok(Self {
            run_id,
            config,
            topology,
            baseline_metric,
            final_metric,
            delta_val_bpb: baseline_metric - final_metric,
            rounds_executed: tables.rounds_executed,
            promotions: tables.promotions.len(),
            state_counts: tables.state_counts,
            initial_commit,
            initial_tree,
            final_commit,
            final_tree,
            accepted_patch_chain: tables.promotions,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TelemetryError> {
        let text = std::fs::read_to_string(path).map_err(|source| TelemetryError::Storage {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `report.csv`, `progress.csv` and (when given) `summary.json`.
pub fn export(
    dir: &Path,
    tables: &RunTables,
    report: Option<&RunReport>,
) -> Result<(), TelemetryError> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| TelemetryError::Storage { path, source })
    };
    write(STATES_CSV, tables.states_csv())?;
    write(PROGRESS_CSV, tables.progress_csv())?;
    if let Some(r) = report {
        write(SUMMARY_FILE, serde_json::to_string_pretty(r)? + "\n")?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("replay diverged at {}: {detail}", match .round { Some(r) => format!("round {r}"), None => "the final state".to_string() })]
    Divergence { round: Option<u32>, detail: String },
}

/// Re-applies the accepted patch chain on top of the run's initial commit in
/// a scratch worktree, checking every intermediate tree, and returns the
/// replayed final commit. The main branch is left untouched.
pub fn replay(report: &RunReport, repo: &RepoHandle) -> Result<CommitId, ReplayError> {
    let initial = repo.resolve_commit(&report.initial_commit.0)?;
    if repo.tree_of(&initial)? != report.initial_tree {
        return Err(ReplayError::Divergence {
            round: None,
            detail: "initial commit tree does not match the report".into(),
        });
    }
    let w = repo.create_worktree(&initial, &format!("replay-{}", report.run_id))?;
    let result = (|| {
        let mut head = initial.clone();
        for entry in &report.accepted_patch_chain {
            let diverged = |detail: String| ReplayError::Divergence {
                round: Some(entry.round),
                detail,
            };
            w.apply(&entry.edits).map_err(|e| diverged(e.to_string()))?;
            let tree = w.tree_hash()?;
            if tree != entry.tree {
                return Err(diverged(format!("tree {tree} != recorded {}", entry.tree)));
            }
            head = repo.commit_tree(&tree, &head, &entry.message)?;
        }
        let tree = w.tree_hash()?;
        if tree != report.final_tree {
            return Err(ReplayError::Divergence {
                round: None,
                detail: format!("final tree {tree} != recorded {}", report.final_tree),
            });
        }
        Ok(head)
    })();
    repo.destroy_worktree(&w);
    result
}

//! Round orchestration for the three topologies.
//!
//! * `single`: one worker proposal per round.
//! * `subagent`: `k` workers in parallel worktrees; when at least two beat
//!   the best metric, a coordinator merges them and the lowest metric wins.
//! * `team`: experts take turns editing one shared worktree, training runs
//!   once after the chat, and an engineer gets one chance to repair a failure.
//!
//! Rounds start only while the wall-clock budget has time left; a round in
//! flight always completes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};

use crate::agents::{
    AgentBackend, AgentError, AgentPool, AgentRequest, AgentResponse, CallKey, HttpBackend,
    Prompts, Role, ScriptError, ScriptedBackend,
};
use crate::config::{BackendKind, ConfigError, RunConfig, Topology};
use crate::exec::{EvalOutcome, ExecError, Executor, PreflightReport};
use crate::memory::{ExperienceRecord, MemoryError, MemoryFile, MemoryKind, Outcome};
use crate::patch::{parse_proposal, Edit, Proposal};
use crate::repo::{CommitId, EditError, RepoError, RepoHandle, WorktreeHandle};
use crate::telemetry::{
    aggregate, classify, export, read_log, EventSink, LifecycleState, LogRecord, PromotionRecord,
    RunReport, TelemetryError, TelemetryEvent, EVENTS_FILE,
};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LOG_DIR: &str = "logs";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("agent backend: {0}")]
    Agent(#[from] AgentError),
    #[error("baseline evaluation failed: {0}")]
    BaselineFailed(String),
    #[error("run directory {0} already holds an event log")]
    RunDirExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("configured topology is {actual}, expected {expected}")]
    TopologyMismatch {
        expected: Topology,
        actual: Topology,
    },
    #[error("candidate set is empty")]
    EmptyCandidates,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Wall-clock budget of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Budget {
    pub t_max_s: f64,
    pub min_round_margin_s: f64,
    pub started_at: DateTime<Utc>,
}

impl Budget {
    pub fn new(t_max_s: f64, min_round_margin_s: f64, started_at: DateTime<Utc>) -> Self {
        Self {
            t_max_s,
            min_round_margin_s,
            started_at,
        }
    }

    pub fn elapsed_s(&self, now: DateTime<Utc>) -> f64 {
        (now - self.started_at)
            .num_microseconds()
            .unwrap_or(i64::MAX) as f64
            / 1e6
    }

    pub fn may_start_round(&self, now: DateTime<Utc>) -> bool {
        remaining(self, now) > self.min_round_margin_s
    }
}

/// Seconds left, never negative.
pub fn remaining(budget: &Budget, now: DateTime<Utc>) -> f64 {
    (budget.t_max_s - budget.elapsed_s(now)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected,
    /// The candidate metric was NaN or infinite; always rejected.
    NonFinite,
}

impl Verdict {
    pub fn accepted(self) -> bool {
        self == Verdict::Accepted
    }
}

/// Strict-improvement rule: lower is better, ties are rejected.
pub fn accept(l_new: f64, l_best: f64) -> Verdict {
    if !l_new.is_finite() {
        Verdict::NonFinite
    } else if l_new < l_best {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CandidateSource {
    /// 1-based worker index.
    Worker(usize),
    Merged,
}

impl CandidateSource {
    pub fn label(self) -> String {
        match self {
            CandidateSource::Worker(k) => format!("worker-{k}"),
            CandidateSource::Merged => "coordinator".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source: CandidateSource,
    pub proposal: Proposal,
    pub metric: f64,
}

/// Index of the lowest-metric candidate. Ties go to a worker over the merged
/// candidate, then to the lowest worker index.
pub fn select_best(candidates: &[Candidate]) -> Result<usize, RunError> {
    candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.metric.total_cmp(&b.metric).then(a.source.cmp(&b.source)))
        .map(|(i, _)| i)
        .ok_or(RunError::EmptyCandidates)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoffEntry {
    pub role: Role,
    pub idea_summary: String,
    pub motivation: String,
    pub diff: String,
    pub failed: bool,
}

/// What the experts have done so far this round, passed to the next one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HandoffContext {
    entries: Vec<HandoffEntry>,
}

impl HandoffContext {
    pub fn entries(&self) -> &[HandoffEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push_proposal(&mut self, role: Role, p: &Proposal) {
        let mut diff = String::new();
        for e in &p.edits {
            let _ = write!(
                diff,
                "EDIT {}\n--- before\n{}+++ after\n{}",
                e.target_file, e.search_block, e.replace_block
            );
        }
        self.entries.push(HandoffEntry {
            role,
            idea_summary: p.idea_summary.clone(),
            motivation: p.motivation.clone(),
            diff,
            failed: false,
        });
    }

    pub fn push_failure(&mut self, role: Role, reason: &str) {
        self.entries.push(HandoffEntry {
            role,
            idea_summary: String::new(),
            motivation: reason.to_string(),
            diff: String::new(),
            failed: true,
        });
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "(no changes yet)\n".into();
        }
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "### Turn {}: {}", i + 1, e.role);
            if e.failed {
                let _ = writeln!(out, "FAILED: {}", e.motivation);
            } else {
                let _ = writeln!(out, "IDEA_SUMMARY: {}", e.idea_summary);
                let _ = writeln!(out, "MOTIVATION: {}", e.motivation);
                out.push_str(&e.diff);
            }
            out.push('\n');
        }
        out
    }

    /// Applied ideas joined in turn order.
    pub fn summary(&self) -> String {
        let ideas: Vec<&str> = self
            .entries
            .iter()
            .filter(|e| !e.failed)
            .map(|e| e.idea_summary.as_str())
            .collect();
        if ideas.is_empty() {
            "no applied changes".into()
        } else {
            ideas.join("; ")
        }
    }
}

/// Result of pushing one reply through parse, apply, preflight and training.
#[derive(Debug, Clone)]
struct Stages {
    state: LifecycleState,
    proposal: Option<Proposal>,
    preflight: Option<PreflightReport>,
    outcome: Option<EvalOutcome>,
    detail: String,
}

impl Stages {
    fn proposal_failure(detail: String) -> Self {
        Self {
            state: LifecycleState::ProposalFailure,
            proposal: None,
            preflight: None,
            outcome: None,
            detail,
        }
    }

    fn metric(&self) -> Option<f64> {
        match self.state {
            LifecycleState::TrainingSuccess => self.outcome.as_ref().and_then(|o| o.metric),
            _ => None,
        }
    }

    fn idea(&self) -> Option<String> {
        self.proposal.as_ref().map(|p| p.idea_summary.clone())
    }
}

#[derive(Debug)]
struct Attempt {
    source: String,
    worktree: WorktreeHandle,
    stages: Stages,
    duration_s: f64,
}

#[derive(Debug)]
struct RunState {
    round: u32,
    l_best: f64,
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").to_string()
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Builds the agent backend named in the config.
pub fn build_backend(cfg: &RunConfig) -> Result<Arc<dyn AgentBackend>, RunError> {
    Ok(match cfg.agents.backend {
        BackendKind::Scripted => {
            let path = cfg.agents.script.as_deref().ok_or_else(|| {
                ConfigError::Invalid("agents.script is required for the scripted backend".into())
            })?;
            Arc::new(ScriptedBackend::from_file(path)?)
        }
        BackendKind::Http => Arc::new(HttpBackend::new(&cfg.agents, cfg.seed)?),
    })
}

/// One configured run: repository, executor, agents, memory and event log.
pub struct Orchestrator {
    cfg: RunConfig,
    run_id: String,
    run_dir: PathBuf,
    repo: RepoHandle,
    exec: Executor,
    agents: AgentPool,
    exp: MemoryFile,
    meta: Option<MemoryFile>,
    sink: EventSink,
}

impl Orchestrator {
    pub fn new(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let backend = build_backend(&cfg)?;
        Self::with_backend(cfg, backend)
    }

    /// Like [`Orchestrator::new`] but with a caller-supplied backend.
    pub fn with_backend(
        mut cfg: RunConfig,
        backend: Arc<dyn AgentBackend>,
    ) -> Result<Self, RunError> {
        cfg.validate()?;
        let run_id = cfg.run_id.clone().unwrap_or_else(|| {
            format!(
                "{}-{}",
                Utc::now().format("%Y%m%dT%H%M%SZ"),
                cfg.topology.kind
            )
        });
        cfg.run_id = Some(run_id.clone());
        let run_dir = cfg.out_dir.join(&run_id);
        let events = run_dir.join(EVENTS_FILE);
        if events.exists() {
            return Err(RunError::RunDirExists(run_dir));
        }
        std::fs::create_dir_all(run_dir.join(LOG_DIR)).map_err(io_err(&run_dir))?;
        let snapshot = run_dir.join(CONFIG_SNAPSHOT);
        std::fs::write(&snapshot, cfg.to_toml_string()?).map_err(io_err(&snapshot))?;

        let repo = RepoHandle::open(
            &cfg.repo.path,
            &cfg.repo.main_branch,
            cfg.repo.scratch_dir.clone(),
        )?;
        let exec = Executor::new(&cfg.execution, cfg.eval_permits())?;
        let prompts = Prompts::load(cfg.agents.prompt_dir.as_deref())?;
        let exp = MemoryFile::create(
            &run_dir,
            MemoryKind::Experience,
            cfg.memory.seed_exp.as_deref(),
        )?;
        let meta = match cfg.topology.kind {
            Topology::Team => Some(MemoryFile::create(
                &run_dir,
                MemoryKind::Meta,
                cfg.memory.seed_meta.as_deref(),
            )?),
            _ => None,
        };
        let sink = EventSink::create(&events)?;
        Ok(Self {
            cfg,
            run_id,
            run_dir,
            repo,
            exec,
            agents: AgentPool::new(backend, prompts),
            exp,
            meta,
            sink,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn repo(&self) -> &RepoHandle {
        &self.repo
    }

    /// Runs rounds until the budget or round cap is reached, then writes
    /// `summary.json`, `report.csv` and `progress.csv`. Scratch worktrees are
    /// removed whatever the outcome.
    pub fn run(self) -> Result<RunReport, RunError> {
        let result = self.run_rounds();
        self.repo.cleanup();
        let report = result?;
        log::info!(
            "run {} finished: {} rounds, val_bpb {:.4} -> {:.4}",
            report.run_id,
            report.rounds_executed,
            report.baseline_metric,
            report.final_metric
        );
        Ok(report)
    }

    fn run_rounds(&self) -> Result<RunReport, RunError> {
        let initial = self.repo.baseline_commit()?;
        let initial_tree = self.repo.tree_of(&initial)?;
        let baseline = self.evaluate_baseline(&initial)?;
        log::info!("baseline val_bpb {baseline:.4} at {initial}");
        self.sink.emit(&LogRecord::RunStart {
            run_id: self.run_id.clone(),
            topology: self.cfg.topology.kind,
            baseline_metric: baseline,
            initial_commit: initial,
            initial_tree,
            timestamp: Utc::now(),
        })?;

        let budget = Budget::new(
            self.cfg.budget.t_max_s as f64,
            self.cfg.budget.min_round_margin_s as f64,
            Utc::now(),
        );
        let mut st = RunState {
            round: 0,
            l_best: baseline,
        };
        loop {
            if self.cfg.budget.max_rounds.is_some_and(|m| st.round >= m) {
                break;
            }
            let now = Utc::now();
            if !budget.may_start_round(now) {
                break;
            }
            st.round += 1;
            self.sink.emit(&LogRecord::RoundStart {
                run_id: self.run_id.clone(),
                round: st.round,
                elapsed_s: budget.elapsed_s(now),
                timestamp: now,
            })?;
            let promoted = match self.cfg.topology.kind {
                Topology::Single => self.round_single(&mut st)?,
                Topology::Subagent => self.round_subagent(&mut st)?,
                Topology::Team => self.round_team(&mut st)?,
            };
            let now = Utc::now();
            log::info!(
                "round {} done: best {:.4}{}",
                st.round,
                st.l_best,
                if promoted { " (promoted)" } else { "" }
            );
            self.sink.emit(&LogRecord::RoundEnd {
                run_id: self.run_id.clone(),
                round: st.round,
                elapsed_s: budget.elapsed_s(now),
                best_metric: st.l_best,
                promoted,
                timestamp: now,
            })?;
        }

        let final_commit = self.repo.baseline_commit()?;
        self.sink.emit(&LogRecord::RunEnd {
            run_id: self.run_id.clone(),
            final_metric: st.l_best,
            final_tree: self.repo.tree_of(&final_commit)?,
            final_commit,
            rounds_executed: st.round,
            timestamp: Utc::now(),
        })?;

        let records = read_log(self.sink.path())?;
        let report = RunReport::from_log(self.cfg.clone(), &records)?;
        export(&self.run_dir, &aggregate(&records), Some(&report))?;
        Ok(report)
    }

    fn evaluate_baseline(&self, commit: &CommitId) -> Result<f64, RunError> {
        let w = self
            .repo
            .create_worktree(commit, &self.worktree_id(0, "baseline"))?;
        let pre = self.exec.preflight(&w);
        let outcome = match &pre {
            Ok(p) if p.passed => Some(self.exec.evaluate(&w)),
            _ => None,
        };
        self.repo.destroy_worktree(&w);
        let pre = pre?;
        if !pre.passed {
            return Err(RunError::BaselineFailed(pre.detail));
        }
        let outcome = outcome.expect("evaluated after passing preflight");
        outcome.metric.ok_or_else(|| {
            RunError::BaselineFailed(format!("{}\n{}", outcome.describe(), outcome.log_excerpt))
        })
    }

    fn worktree_id(&self, round: u32, label: &str) -> String {
        format!("{}/{round}/{label}", self.run_id)
    }

    fn code_context(&self, w: &WorktreeHandle) -> Result<String, RunError> {
        let files = w.read_files(&self.cfg.repo.target_files)?;
        let mut out = String::new();
        for (name, text) in files {
            let _ = write!(out, "### {name}\n```\n{text}");
            if !text.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n\n");
        }
        Ok(out)
    }

    fn memory_context(&self) -> Result<String, RunError> {
        let (limit, budget) = (self.cfg.memory.context_limit, self.cfg.memory.char_budget);
        let mut out = self.exp.render_context(limit, budget)?;
        if let Some(meta) = &self.meta {
            out.push('\n');
            out.push_str(&meta.render_context(limit, budget)?);
        }
        Ok(out)
    }

    /// Parse, apply to `w`, preflight, train.
    fn process_reply(&self, w: &WorktreeHandle, raw: &str) -> Result<Stages, RunError> {
        let parsed = parse_proposal(raw);
        let proposal = match &parsed {
            Ok(p) => p.clone(),
            Err(e) => return Ok(Stages::proposal_failure(e.to_string())),
        };
        match w.apply(&proposal.edits) {
            Ok(_) => {}
            Err(EditError::Apply(e)) => {
                return Ok(Stages {
                    proposal: Some(proposal),
                    ..Stages::proposal_failure(e.to_string())
                })
            }
            Err(EditError::Repo(e)) => return Err(e.into()),
        }
        let pre = self.exec.preflight(w)?;
        let outcome = pre.passed.then(|| self.exec.evaluate(w));
        let state = classify(&parsed, Some(&pre), outcome.as_ref());
        let detail = match (&outcome, pre.passed) {
            (_, false) => first_line(&pre.detail),
            (Some(o), true) => o.describe(),
            (None, true) => String::new(),
        };
        Ok(Stages {
            state,
            proposal: Some(proposal),
            preflight: Some(pre),
            outcome,
            detail,
        })
    }

    /// Creates a worktree at `base`, asks an agent for a proposal against it
    /// and runs the proposal through every stage.
    fn attempt(
        &self,
        round: u32,
        source: &str,
        base: &CommitId,
        call: impl FnOnce(String) -> Result<AgentResponse, AgentError>,
    ) -> Result<Attempt, RunError> {
        let start = Instant::now();
        let w = self
            .repo
            .create_worktree(base, &self.worktree_id(round, source))?;
        let staged = (|| {
            let code = self.code_context(&w)?;
            match call(code) {
                Ok(reply) => {
                    let stages = self.process_reply(&w, &reply.raw_text)?;
                    self.write_log(round, source, Some(&reply.raw_text), &stages);
                    Ok(stages)
                }
                Err(e) if e.is_fatal() => Err(RunError::Agent(e)),
                Err(e) => {
                    let stages = Stages::proposal_failure(e.to_string());
                    self.write_log(round, source, None, &stages);
                    Ok(stages)
                }
            }
        })();
        match staged {
            Ok(stages) => Ok(Attempt {
                source: source.to_string(),
                worktree: w,
                stages,
                duration_s: start.elapsed().as_secs_f64(),
            }),
            Err(e) => {
                self.repo.destroy_worktree(&w);
                Err(e)
            }
        }
    }

    fn write_log(&self, round: u32, label: &str, reply: Option<&str>, stages: &Stages) {
        let mut text = format!("# round {round} {label}\nstate: {}\n", stages.state);
        if !stages.detail.is_empty() {
            let _ = writeln!(text, "detail: {}", stages.detail);
        }
        if let Some(r) = reply {
            let _ = write!(text, "\n## reply\n{r}");
            if !r.ends_with('\n') {
                text.push('\n');
            }
        }
        if let Some(p) = &stages.preflight {
            if !p.passed {
                let _ = write!(text, "\n## preflight ({:?})\n{}\n", p.stage, p.detail);
            }
        }
        if let Some(o) = &stages.outcome {
            let _ = write!(
                text,
                "\n## training ({:.2}s, {})\n{}",
                o.duration_s,
                o.describe(),
                o.log_excerpt
            );
        }
        let path = self
            .run_dir
            .join(LOG_DIR)
            .join(format!("r{round:03}-{label}.log"));
        if let Err(e) = std::fs::write(&path, text) {
            log::warn!("writing {}: {e}", path.display());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_proposal(
        &self,
        round: u32,
        source: &str,
        state: LifecycleState,
        metric: Option<f64>,
        baseline_metric: f64,
        duration_s: f64,
        idea_summary: Option<String>,
        detail: String,
    ) -> Result<(), RunError> {
        self.sink.emit(&LogRecord::Proposal(TelemetryEvent {
            run_id: self.run_id.clone(),
            round,
            topology: self.cfg.topology.kind,
            source: source.to_string(),
            state,
            metric,
            baseline_metric,
            duration_s,
            timestamp: Utc::now(),
            idea_summary,
            detail,
        }))?;
        Ok(())
    }

    fn emit_attempt(&self, round: u32, a: &Attempt, baseline_metric: f64) -> Result<(), RunError> {
        self.emit_proposal(
            round,
            &a.source,
            a.stages.state,
            a.stages.metric(),
            baseline_metric,
            a.duration_s,
            a.stages.idea(),
            a.stages.detail.clone(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn remember(
        &self,
        file: &MemoryFile,
        round: u32,
        source: &str,
        idea: &str,
        outcome: Outcome,
        before: f64,
        after: Option<f64>,
    ) -> Result<(), RunError> {
        file.record(&ExperienceRecord {
            round,
            topology: self.cfg.topology.kind,
            source: source.to_string(),
            idea_summary: idea.to_string(),
            outcome,
            metric_before: Some(before),
            metric_after: after,
            timestamp: Utc::now(),
        })?;
        Ok(())
    }

    /// Memory entries for an attempt that will not be promoted.
    fn remember_unpromoted(&self, round: u32, a: &Attempt, l_best: f64) -> Result<(), RunError> {
        let idea = a.stages.idea().unwrap_or_default();
        match a.stages.state {
            LifecycleState::TrainingSuccess => self.remember(
                &self.exp,
                round,
                &a.source,
                &idea,
                Outcome::Failed,
                l_best,
                a.stages.metric(),
            ),
            LifecycleState::TrainingCrash if self.cfg.memory.record_crashes => self.remember(
                &self.exp,
                round,
                &a.source,
                &idea,
                Outcome::Crash,
                l_best,
                None,
            ),
            _ => Ok(()),
        }
    }

    fn promote(
        &self,
        st: &mut RunState,
        w: &WorktreeHandle,
        source: &str,
        idea: &str,
        edits: Vec<Edit>,
        metric: f64,
    ) -> Result<(), RunError> {
        let message = format!("round {}: {}", st.round, one_line(idea));
        let commit = self.repo.promote(w, &message)?;
        let tree = self.repo.tree_of(&commit)?;
        log::info!(
            "promoted {source} as {commit}: {:.4} -> {metric:.4}",
            st.l_best
        );
        self.sink.emit(&LogRecord::Promotion(PromotionRecord {
            run_id: self.run_id.clone(),
            round: st.round,
            source: source.to_string(),
            commit,
            tree,
            message,
            idea_summary: idea.to_string(),
            metric_before: st.l_best,
            metric_after: metric,
            edits,
            timestamp: Utc::now(),
        }))?;
        st.l_best = metric;
        Ok(())
    }

    fn round_single(&self, st: &mut RunState) -> Result<bool, RunError> {
        let (round, l0) = (st.round, st.l_best);
        let base = self.repo.baseline_commit()?;
        let memory = self.memory_context()?;
        let a = self.attempt(round, "worker", &base, |code| {
            let req = AgentRequest::new(Role::Worker, code, memory);
            self.agents.propose(&CallKey::new(round, "worker", 1), &req)
        })?;
        let result = (|| {
            self.emit_attempt(round, &a, l0)?;
            if let Some(m) = a.stages.metric() {
                if accept(m, l0).accepted() {
                    let p = a
                        .stages
                        .proposal
                        .as_ref()
                        .expect("trained proposals parsed");
                    self.promote(
                        st,
                        &a.worktree,
                        &a.source,
                        &p.idea_summary,
                        p.edits.clone(),
                        m,
                    )?;
                    self.remember(
                        &self.exp,
                        round,
                        &a.source,
                        &p.idea_summary,
                        Outcome::Success,
                        l0,
                        Some(m),
                    )?;
                    return Ok(true);
                }
            }
            self.remember_unpromoted(round, &a, l0)?;
            Ok(false)
        })();
        self.repo.destroy_worktree(&a.worktree);
        result
    }

    fn round_subagent(&self, st: &mut RunState) -> Result<bool, RunError> {
        let round = st.round;
        let base = self.repo.baseline_commit()?;
        let memory = self.memory_context()?;
        let results: Vec<Result<Attempt, RunError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (1..=self.cfg.topology.k)
                .map(|k| {
                    let (base, memory) = (&base, memory.clone());
                    s.spawn(move || {
                        let source = CandidateSource::Worker(k).label();
                        self.attempt(round, &source, base, |code| {
                            let req = AgentRequest::new(Role::Worker, code, memory);
                            self.agents.propose(&CallKey::new(round, &source, 1), &req)
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });
        let mut attempts = Vec::new();
        let mut failure = None;
        for r in results {
            match r {
                Ok(a) => attempts.push(a),
                Err(e) => failure = failure.or(Some(e)),
            }
        }
        let result = match failure {
            Some(e) => Err(e),
            None => self.settle_subagent(st, &base, &memory, &mut attempts),
        };
        for a in &attempts {
            self.repo.destroy_worktree(&a.worktree);
        }
        result
    }

    fn settle_subagent(
        &self,
        st: &mut RunState,
        base: &CommitId,
        memory: &str,
        attempts: &mut Vec<Attempt>,
    ) -> Result<bool, RunError> {
        let (round, l0) = (st.round, st.l_best);
        // (candidate, index into attempts)
        let mut candidates: Vec<(Candidate, usize)> = Vec::new();
        for (i, a) in attempts.iter().enumerate() {
            self.emit_attempt(round, a, l0)?;
            match a.stages.metric().map(|m| (m, accept(m, l0))) {
                Some((m, Verdict::Accepted)) => candidates.push((
                    Candidate {
                        source: CandidateSource::Worker(i + 1),
                        proposal: a.stages.proposal.clone().expect("trained proposals parsed"),
                        metric: m,
                    },
                    i,
                )),
                Some((m, Verdict::NonFinite)) => {
                    log::warn!("{} reported a non-finite metric {m}", a.source)
                }
                _ => self.remember_unpromoted(round, a, l0)?,
            }
        }

        if candidates.len() >= 2 {
            let improving: Vec<(Proposal, f64)> = candidates
                .iter()
                .map(|(c, _)| (c.proposal.clone(), c.metric))
                .collect();
            let source = CandidateSource::Merged.label();
            let merged = self.attempt(round, &source, base, |code| {
                self.agents.merge_candidates(
                    &CallKey::new(round, &source, 1),
                    code,
                    memory.to_string(),
                    &improving,
                )
            })?;
            attempts.push(merged);
            let merged = attempts.last().expect("just pushed");
            self.emit_attempt(round, merged, l0)?;
            if let Some(m) = merged.stages.metric().filter(|m| m.is_finite()) {
                candidates.push((
                    Candidate {
                        source: CandidateSource::Merged,
                        proposal: merged
                            .stages
                            .proposal
                            .clone()
                            .expect("trained proposals parsed"),
                        metric: m,
                    },
                    attempts.len() - 1,
                ));
            }
        }

        if candidates.is_empty() {
            return Ok(false);
        }
        let plain: Vec<Candidate> = candidates.iter().map(|(c, _)| c.clone()).collect();
        let (best, idx) = &candidates[select_best(&plain)?];
        if !accept(best.metric, l0).accepted() {
            return Ok(false);
        }
        let a = &attempts[*idx];
        let p = &best.proposal;
        self.promote(
            st,
            &a.worktree,
            &a.source,
            &p.idea_summary,
            p.edits.clone(),
            best.metric,
        )?;
        self.remember(
            &self.exp,
            round,
            &a.source,
            &p.idea_summary,
            Outcome::Success,
            l0,
            Some(best.metric),
        )?;
        Ok(true)
    }

    fn round_team(&self, st: &mut RunState) -> Result<bool, RunError> {
        let base = self.repo.baseline_commit()?;
        let w = self
            .repo
            .create_worktree(&base, &self.worktree_id(st.round, "team"))?;
        let result = self.team_chat(st, &w);
        self.repo.destroy_worktree(&w);
        result
    }

    fn team_chat(&self, st: &mut RunState, w: &WorktreeHandle) -> Result<bool, RunError> {
        struct Slot {
            source: String,
            failed: Option<String>,
            idea: Option<String>,
            duration_s: f64,
        }

        let (round, l0) = (st.round, st.l_best);
        let memory = self.memory_context()?;
        let roles = &self.cfg.topology.roles;
        let mut handoff = HandoffContext::default();
        let mut applied: Vec<Edit> = Vec::new();
        let mut slots: Vec<Slot> = Vec::new();
        let mut calls: BTreeMap<Role, u32> = BTreeMap::new();

        for turn in 0..self.cfg.topology.turns {
            let start = Instant::now();
            let role = roles[turn % roles.len()];
            let attempt = calls.entry(role).or_default();
            *attempt += 1;
            let key = CallKey::new(round, role.as_str(), *attempt);
            let req = AgentRequest::new(role, self.code_context(w)?, memory.clone())
                .with_handoff(handoff.render());
            let label = format!("t{}-{role}", turn + 1);
            let mut reply_text = None;
            let outcome: Result<Proposal, String> = match self.agents.propose(&key, &req) {
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => Err(e.to_string()),
                Ok(reply) => {
                    reply_text = Some(reply.raw_text.clone());
                    match parse_proposal(&reply.raw_text) {
                        Err(e) => Err(e.to_string()),
                        Ok(p) => match w.apply(&p.edits) {
                            Ok(_) => Ok(p),
                            Err(EditError::Apply(e)) => Err(e.to_string()),
                            Err(EditError::Repo(e)) => return Err(e.into()),
                        },
                    }
                }
            };
            let slot = match outcome {
                Ok(p) => {
                    applied.extend(p.edits.iter().cloned());
                    handoff.push_proposal(role, &p);
                    Slot {
                        source: role.to_string(),
                        failed: None,
                        idea: Some(p.idea_summary),
                        duration_s: start.elapsed().as_secs_f64(),
                    }
                }
                Err(reason) => {
                    handoff.push_failure(role, &reason);
                    self.write_log(
                        round,
                        &label,
                        reply_text.as_deref(),
                        &Stages::proposal_failure(reason.clone()),
                    );
                    Slot {
                        source: role.to_string(),
                        failed: Some(reason),
                        idea: None,
                        duration_s: start.elapsed().as_secs_f64(),
                    }
                }
            };
            if slot.failed.is_none() {
                if let Some(text) = &reply_text {
                    let _ = std::fs::write(
                        self.run_dir
                            .join(LOG_DIR)
                            .join(format!("r{round:03}-{label}.log")),
                        format!("# round {round} {label}\nstate: applied\n\n## reply\n{text}"),
                    );
                }
            }
            slots.push(slot);
        }

        if applied.is_empty() {
            for s in &slots {
                let detail = s.failed.clone().unwrap_or_default();
                self.emit_proposal(
                    round,
                    &s.source,
                    LifecycleState::ProposalFailure,
                    None,
                    l0,
                    s.duration_s,
                    None,
                    detail,
                )?;
            }
            return Ok(false);
        }

        // Train once on the combined result of the chat.
        let pre = self.exec.preflight(w)?;
        let outcome = pre.passed.then(|| self.exec.evaluate(w));
        let chat_ok: Result<(), ()> = Ok(());
        let chat_state = classify(&chat_ok, Some(&pre), outcome.as_ref());
        let chat = Stages {
            state: chat_state,
            proposal: None,
            preflight: Some(pre.clone()),
            outcome: outcome.clone(),
            detail: match &outcome {
                Some(o) => o.describe(),
                None => first_line(&pre.detail),
            },
        };
        self.write_log(round, "team", None, &chat);

        let mut final_metric = chat.metric();
        let mut engineer: Option<(Stages, f64)> = None;
        if chat_state != LifecycleState::TrainingSuccess {
            let start = Instant::now();
            let error_log = match &outcome {
                Some(o) => format!("{}\n{}", o.describe(), o.log_excerpt),
                None => pre.detail.clone(),
            };
            let key = CallKey::new(round, Role::Engineer.as_str(), 1);
            let stages = match self.agents.debug_fix(
                &key,
                &error_log,
                handoff.render(),
                self.code_context(w)?,
            ) {
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => {
                    let s = Stages::proposal_failure(e.to_string());
                    self.write_log(round, "engineer", None, &s);
                    s
                }
                Ok(reply) => {
                    let s = self.process_reply(w, &reply.raw_text)?;
                    self.write_log(round, "engineer", Some(&reply.raw_text), &s);
                    s
                }
            };
            if let Some(m) = stages.metric() {
                final_metric = Some(m);
                if let Some(p) = &stages.proposal {
                    applied.extend(p.edits.iter().cloned());
                }
            } else {
                let meta = self.meta.as_ref().expect("team runs keep meta-memory");
                self.remember(
                    meta,
                    round,
                    "engineer",
                    &handoff.summary(),
                    Outcome::UnresolvableCrash,
                    l0,
                    None,
                )?;
                if self.cfg.memory.record_crashes {
                    self.remember(
                        &self.exp,
                        round,
                        "team",
                        &handoff.summary(),
                        Outcome::Crash,
                        l0,
                        None,
                    )?;
                }
            }
            engineer = Some((stages, start.elapsed().as_secs_f64()));
        }

        for s in &slots {
            match &s.failed {
                Some(reason) => self.emit_proposal(
                    round,
                    &s.source,
                    LifecycleState::ProposalFailure,
                    None,
                    l0,
                    s.duration_s,
                    None,
                    reason.clone(),
                )?,
                None => self.emit_proposal(
                    round,
                    &s.source,
                    chat_state,
                    chat.metric(),
                    l0,
                    s.duration_s,
                    s.idea.clone(),
                    chat.detail.clone(),
                )?,
            }
        }
        if let Some((stages, duration_s)) = &engineer {
            self.emit_proposal(
                round,
                Role::Engineer.as_str(),
                stages.state,
                stages.metric(),
                l0,
                *duration_s,
                stages.idea(),
                stages.detail.clone(),
            )?;
        }

        let Some(metric) = final_metric else {
            return Ok(false);
        };
        let idea = handoff.summary();
        if accept(metric, l0).accepted() {
            self.promote(st, w, "team", &idea, applied, metric)?;
            self.remember(
                &self.exp,
                round,
                "team",
                &idea,
                Outcome::Success,
                l0,
                Some(metric),
            )?;
            let roles: Vec<&str> = handoff.entries().iter().map(|e| e.role.as_str()).collect();
            let meta = self.meta.as_ref().expect("team runs keep meta-memory");
            self.remember(
                meta,
                round,
                "team",
                &format!("{}: {idea}", roles.join(" > ")),
                Outcome::EffectiveCollaboration,
                l0,
                Some(metric),
            )?;
            Ok(true)
        } else {
            self.remember(
                &self.exp,
                round,
                "team",
                &idea,
                Outcome::Failed,
                l0,
                Some(metric),
            )?;
            Ok(false)
        }
    }
}

fn require(cfg: &RunConfig, expected: Topology) -> Result<(), RunError> {
    if cfg.topology.kind != expected {
        return Err(RunError::TopologyMismatch {
            expected,
            actual: cfg.topology.kind,
        });
    }
    Ok(())
}

/// Runs whichever topology the config names.
pub fn run(cfg: RunConfig) -> Result<RunReport, RunError> {
    Orchestrator::new(cfg)?.run()
}

pub fn run_single(cfg: RunConfig) -> Result<RunReport, RunError> {
    require(&cfg, Topology::Single)?;
    run(cfg)
}

pub fn run_subagent(cfg: RunConfig) -> Result<RunReport, RunError> {
    require(&cfg, Topology::Subagent)?;
    run(cfg)
}

pub fn run_team(cfg: RunConfig) -> Result<RunReport, RunError> {
    require(&cfg, Topology::Team)?;
    run(cfg)
}

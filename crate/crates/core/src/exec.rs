//! Preflight validation and evaluation runs.
//!
//! Both stages run opaque, configured commands inside a worktree. Each child
//! gets its own process group so the whole tree can be killed on timeout,
//! and stdout and stderr share one pipe so the log keeps their interleaving.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::config::ExecutionConfig;
use crate::repo::{RepoError, WorktreeHandle};

/// Output beyond this many bytes is dropped from the front.
const MAX_CAPTURE_BYTES: usize = 16 << 20;
const POLL_INTERVAL: Duration = Duration::from_millis(10);
const READER_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("invalid execution config: {0}")]
    Config(String),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("evaluate called on a worktree whose preflight did not pass")]
    PreflightNotPassed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreflightStage {
    Compile,
    Denylist,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreflightReport {
    pub passed: bool,
    pub stage: PreflightStage,
    pub detail: String,
}

impl PreflightReport {
    fn pass() -> Self {
        Self {
            passed: true,
            stage: PreflightStage::None,
            detail: String::new(),
        }
    }

    fn fail(stage: PreflightStage, detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            stage,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Success,
    Crash,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalFailure {
    NonZeroExit { code: i32 },
    Signal { signal: i32 },
    MetricMissing,
    MetricInvalid { text: String },
    TimedOut,
    SpawnFailed { message: String },
}

impl std::fmt::Display for EvalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalFailure::NonZeroExit { code } => write!(f, "exit code {code}"),
            EvalFailure::Signal { signal } => write!(f, "killed by signal {signal}"),
            EvalFailure::MetricMissing => f.write_str("MetricMissing"),
            EvalFailure::MetricInvalid { text } => write!(f, "MetricInvalid `{text}`"),
            EvalFailure::TimedOut => f.write_str("timed out"),
            EvalFailure::SpawnFailed { message } => write!(f, "spawn failed: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub status: EvalStatus,
    /// val_bpb; present exactly when `status` is success.
    pub metric: Option<f64>,
    pub duration_s: f64,
    pub log_excerpt: String,
    pub failure: Option<EvalFailure>,
}

impl EvalOutcome {
    pub fn is_success(&self) -> bool {
        self.status == EvalStatus::Success
    }

    pub fn describe(&self) -> String {
        match (&self.failure, self.metric) {
            (Some(f), _) => f.to_string(),
            (None, Some(m)) => format!("val_bpb {m:.4}"),
            (None, None) => String::new(),
        }
    }
}

enum Exit {
    Code(i32),
    Signal(i32),
    TimedOut,
    SpawnFailed(String),
}

struct CommandRun {
    exit: Exit,
    output: String,
    duration: Duration,
}

fn kill_group(pid: u32) {
    // SAFETY: kill(2) with a negative pid signals the process group; no memory is touched.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

fn run_command(
    argv: &[String],
    dir: &Path,
    timeout: Duration,
    passthrough: &[String],
) -> CommandRun {
    let start = Instant::now();
    let spawn_failed = |msg: String| CommandRun {
        exit: Exit::SpawnFailed(msg),
        output: String::new(),
        duration: start.elapsed(),
    };
    let Some((program, args)) = argv.split_first() else {
        return spawn_failed("empty command".into());
    };
    let (mut reader, writer) = match std::io::pipe() {
        Ok(p) => p,
        Err(e) => return spawn_failed(e.to_string()),
    };
    let writer_err = match writer.try_clone() {
        Ok(w) => w,
        Err(e) => return spawn_failed(e.to_string()),
    };

    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(dir)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(writer)
        .stderr(writer_err)
        .process_group(0);
    for var in std::iter::once("PATH").chain(passthrough.iter().map(String::as_str)) {
        if let Some(v) = std::env::var_os(var) {
            cmd.env(var, v);
        }
    }
    let spawned = cmd.spawn();
    // the Command still owns our copies of the pipe's write end
    drop(cmd);
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return spawn_failed(format!("{program}: {e}")),
    };
    let pid = child.id();

    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match reader.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if buf.len() > MAX_CAPTURE_BYTES * 2 {
                        buf.drain(..buf.len() - MAX_CAPTURE_BYTES);
                    }
                }
            }
        }
        let _ = tx.send(buf);
    });

    let exit = loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                break match (status.code(), status.signal()) {
                    (Some(code), _) => Exit::Code(code),
                    (None, Some(sig)) => Exit::Signal(sig),
                    (None, None) => Exit::Code(-1),
                };
            }
            Ok(None) => {}
            Err(e) => {
                kill_group(pid);
                let _ = child.wait();
                break Exit::SpawnFailed(e.to_string());
            }
        }
        if start.elapsed() >= timeout {
            kill_group(pid);
            let _ = child.wait();
            break Exit::TimedOut;
        }
        std::thread::sleep(POLL_INTERVAL);
    };
    // stragglers the command left behind in its group
    kill_group(pid);
    let duration = start.elapsed();
    let mut bytes = rx.recv_timeout(READER_GRACE).unwrap_or_default();
    if bytes.len() > MAX_CAPTURE_BYTES {
        bytes.drain(..bytes.len() - MAX_CAPTURE_BYTES);
    }
    CommandRun {
        exit,
        output: String::from_utf8_lossy(&bytes).into_owned(),
        duration,
    }
}

/// Last `n` lines of `text`.
pub fn tail_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

/// Counting semaphore bounding concurrent evaluations.
#[derive(Debug)]
pub struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct PermitGuard<'a>(&'a Permits);

impl Permits {
    pub fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Compiled execution settings shared by all workers of a run.
#[derive(Debug)]
pub struct Executor {
    cfg: ExecutionConfig,
    metric: Regex,
    denylist: Vec<Regex>,
    permits: Permits,
}

impl Executor {
    pub fn new(cfg: &ExecutionConfig, permits: usize) -> Result<Self, ExecError> {
        let metric = Regex::new(&cfg.metric_pattern)
            .map_err(|e| ExecError::Config(format!("metric_pattern: {e}")))?;
        if metric.captures_len() < 2 {
            return Err(ExecError::Config(
                "metric_pattern needs a capture group".into(),
            ));
        }
        let denylist = cfg
            .denylist_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| ExecError::Config(format!("denylist `{p}`: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            metric,
            denylist,
            permits: Permits::new(permits),
        })
    }

    pub fn config(&self) -> &ExecutionConfig {
        &self.cfg
    }

    /// Compile check, then denylist scan of every file changed since the
    /// baseline. Never spends evaluation budget.
    pub fn preflight(&self, w: &WorktreeHandle) -> Result<PreflightReport, ExecError> {
        if !self.cfg.preflight_command.is_empty() {
            let run = run_command(
                &self.cfg.preflight_command,
                &w.path,
                Duration::from_secs_f64(self.cfg.preflight_timeout_s.max(0.001)),
                &self.cfg.env_passthrough,
            );
            let why = match run.exit {
                Exit::Code(0) => None,
                Exit::Code(c) => Some(format!("preflight exited with {c}")),
                Exit::Signal(s) => Some(format!("preflight killed by signal {s}")),
                Exit::TimedOut => Some("preflight timed out".to_string()),
                Exit::SpawnFailed(m) => Some(format!("preflight could not start: {m}")),
            };
            if let Some(why) = why {
                let excerpt = tail_lines(&run.output, self.cfg.log_excerpt_lines);
                return Ok(PreflightReport::fail(
                    PreflightStage::Compile,
                    format!("{why}\n{excerpt}").trim_end().to_string(),
                ));
            }
        }
        for file in w.changed_files()? {
            let Ok(bytes) = std::fs::read(w.path.join(&file)) else {
                continue;
            };
            let text = String::from_utf8_lossy(&bytes);
            if let Some(hit) = self.scan_denylist(&text) {
                return Ok(PreflightReport::fail(
                    PreflightStage::Denylist,
                    format!("{file}:{}: matches `{}`", hit.0, hit.1),
                ));
            }
        }
        Ok(PreflightReport::pass())
    }

    /// First (line number, pattern) denylist hit in `text`.
    pub fn scan_denylist(&self, text: &str) -> Option<(usize, String)> {
        for (idx, line) in text.lines().enumerate() {
            if let Some(re) = self.denylist.iter().find(|re| re.is_match(line)) {
                return Some((idx + 1, re.as_str().to_string()));
            }
        }
        None
    }

    /// Metric from the last match of the metric pattern in `output`.
    pub fn extract_metric(&self, output: &str) -> Result<f64, EvalFailure> {
        let caps = self
            .metric
            .captures_iter(output)
            .last()
            .ok_or(EvalFailure::MetricMissing)?;
        let text = caps.get(1).map_or("", |m| m.as_str());
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
            _ => Err(EvalFailure::MetricInvalid {
                text: text.to_string(),
            }),
        }
    }

    /// Runs the evaluation command, refusing worktrees that did not pass preflight.
    pub fn evaluate_gated(
        &self,
        w: &WorktreeHandle,
        preflight: &PreflightReport,
    ) -> Result<EvalOutcome, ExecError> {
        if !preflight.passed {
            return Err(ExecError::PreflightNotPassed);
        }
        Ok(self.evaluate(w))
    }

    /// Runs the evaluation command in `w` under the configured timeout.
    pub fn evaluate(&self, w: &WorktreeHandle) -> EvalOutcome {
        let _permit = self.permits.acquire();
        let run = run_command(
            &self.cfg.eval_command,
            &w.path,
            Duration::from_secs_f64(self.cfg.eval_timeout_s),
            &self.cfg.env_passthrough,
        );
        let log_excerpt = tail_lines(&run.output, self.cfg.log_excerpt_lines);
        let duration_s = run.duration.as_secs_f64();
        let crash = |failure| EvalOutcome {
            status: EvalStatus::Crash,
            metric: None,
            duration_s,
            log_excerpt: log_excerpt.clone(),
            failure: Some(failure),
        };
        match run.exit {
            Exit::TimedOut => EvalOutcome {
                status: EvalStatus::Timeout,
                metric: None,
                duration_s,
                log_excerpt,
                failure: Some(EvalFailure::TimedOut),
            },
            Exit::SpawnFailed(message) => crash(EvalFailure::SpawnFailed { message }),
            Exit::Signal(signal) => crash(EvalFailure::Signal { signal }),
            Exit::Code(code) if code != 0 => crash(EvalFailure::NonZeroExit { code }),
            Exit::Code(_) => match self.extract_metric(&run.output) {
                Ok(metric) => EvalOutcome {
                    status: EvalStatus::Success,
                    metric: Some(metric),
                    duration_s,
                    log_excerpt,
                    failure: None,
                },
                Err(f) => crash(f),
            },
        }
    }
}

//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use autoresearch::agents::{ScriptBuilder, ScriptedBackend};
use autoresearch::config::{RunConfig, Topology};
use autoresearch::memory::{EXPERIENCE_FILE, META_FILE};
use autoresearch::telemetry::{read_log, LogRecord, RunReport, TelemetryEvent, EVENTS_FILE};
use autoresearch::testbed::{
    crash_proposal, edit_proposal, init_mock_target, metric_proposal, mock_config,
    syntax_error_proposal,
};
use autoresearch::topology::{Orchestrator, RunError};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub const BASELINE: f64 = 1.35;

pub struct Fixture {
    pub dir: TempDir,
    pub repo: PathBuf,
    pub script: PathBuf,
    pub out: PathBuf,
}

impl Fixture {
    pub fn new(sleep_s: f64, script: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let repo = init_mock_target(dir.path().join("target"), sleep_s).unwrap();
        let script_path = dir.path().join("replies.script");
        std::fs::write(&script_path, script).unwrap();
        let out = dir.path().join("runs");
        Self {
            dir,
            repo,
            script: script_path,
            out,
        }
    }

    pub fn config(&self, topology: Topology) -> RunConfig {
        mock_config(&self.repo, &self.script, &self.out, topology)
    }

    /// Wraps the eval command so every training run appends a snapshot of
    /// the trained script to `evals.log` in the fixture directory.
    pub fn trace_evals(&self, cfg: &mut RunConfig) -> PathBuf {
        let log = self.dir.path().join("evals.log");
        cfg.execution.eval_command = vec![
            "sh".into(),
            "-c".into(),
            format!(
                "cat train.sh >> '{0}'; echo '=== end of snapshot' >> '{0}'; exec sh train.sh",
                log.display()
            ),
        ];
        log
    }
}

/// Runs `cfg` with a scripted backend the caller can inspect afterwards.
pub fn run_scripted(cfg: RunConfig) -> Result<(RunReport, Arc<ScriptedBackend>), RunError> {
    let backend =
        Arc::new(ScriptedBackend::from_file(cfg.agents.script.as_ref().unwrap()).unwrap());
    let report = Orchestrator::with_backend(cfg, backend.clone())?.run()?;
    Ok((report, backend))
}

pub fn run_dir(report: &RunReport) -> PathBuf {
    report.config.out_dir.join(&report.run_id)
}

pub fn records(report: &RunReport) -> Vec<LogRecord> {
    read_log(&run_dir(report).join(EVENTS_FILE)).unwrap()
}

pub fn proposal_events(report: &RunReport) -> Vec<TelemetryEvent> {
    records(report)
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Proposal(e) => Some(e),
            _ => None,
        })
        .collect()
}

fn entries(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter(|l| l.starts_with("- "))
        .map(str::to_string)
        .collect()
}

pub fn exp_entries(report: &RunReport) -> Vec<String> {
    entries(&run_dir(report).join(EXPERIENCE_FILE))
}

pub fn meta_entries(report: &RunReport) -> Vec<String> {
    entries(&run_dir(report).join(META_FILE))
}

/// sha256 of every file under `dir`, keyed by relative path, `.git` excluded.
pub fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_entry(|e| e.file_name() != ".git")
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e
                .path()
                .strip_prefix(dir)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let bytes = std::fs::read(e.path()).unwrap();
            let hex: String = Sha256::digest(&bytes)
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            (rel, hex)
        })
        .collect()
}

pub fn fmt_metric(m: f64) -> String {
    format!("{m:.4}")
}

/// What one scripted agent reply does to the mock script.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reply {
    Metric(f64),
    Crash,
    Syntax,
    Malformed,
}

pub fn reply_text(reply: Reply, idea: &str, current: f64) -> String {
    let cur = fmt_metric(current);
    match reply {
        Reply::Metric(m) => metric_proposal(idea, &cur, &fmt_metric(m)),
        Reply::Crash => crash_proposal(idea, &cur),
        Reply::Syntax => syntax_error_proposal(idea, &cur),
        Reply::Malformed => format!("I would {idea}, but I forgot the required format.\n"),
    }
}

// ---- single-agent fixture ----

pub const SINGLE_METRICS: [f64; 3] = [1.30, 1.40, 1.22];

pub fn single_script() -> String {
    let mut b = ScriptBuilder::new();
    let mut best = BASELINE;
    for (i, m) in SINGLE_METRICS.iter().enumerate() {
        let r = i as u32 + 1;
        b = b.reply(
            r,
            "worker",
            1,
            &reply_text(Reply::Metric(*m), &format!("r{r} worker"), best),
        );
        if *m < best {
            best = *m;
        }
    }
    b.build()
}

// ---- subagent fixture and a hand-written trace of the subagent procedure ----

#[derive(Debug, Clone)]
pub struct SubRound {
    pub workers: Vec<Reply>,
    pub merged: Option<Reply>,
}

pub fn subagent_rounds() -> Vec<SubRound> {
    use Reply::*;
    vec![
        // two improvers and a crash: the merge fires and wins
        SubRound {
            workers: vec![Metric(1.30), Metric(1.28), Crash],
            merged: Some(Metric(1.26)),
        },
        // one improver: no merge
        SubRound {
            workers: vec![Metric(1.27), Metric(1.25), Syntax],
            merged: None,
        },
        // merged result ties the best worker and loses
        SubRound {
            workers: vec![Metric(1.24), Metric(1.23), Malformed],
            merged: Some(Metric(1.23)),
        },
        // nothing gets through preflight
        SubRound {
            workers: vec![Syntax, Syntax, Syntax],
            merged: None,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubagentTrace {
    /// (round, source, metric)
    pub promotions: Vec<(u32, String, f64)>,
    pub memory: Vec<String>,
    pub coordinator_rounds: Vec<u32>,
    /// Best metric at the start of each round.
    pub round_baselines: Vec<f64>,
    pub final_metric: f64,
}

pub fn idea(round: u32, source: &str) -> String {
    format!("r{round} {source}")
}

/// Line-by-line execution of the subagent loop body on scripted outcomes.
pub fn subagent_oracle(baseline: f64, rounds: &[SubRound]) -> SubagentTrace {
    let mut l_best = baseline;
    let mut t = SubagentTrace {
        promotions: vec![],
        memory: vec![],
        coordinator_rounds: vec![],
        round_baselines: vec![],
        final_metric: baseline,
    };
    let line = |r: u32, src: &str, outcome: &str, a: f64, b: f64| {
        format!(
            "- [round {r}][subagent][{src}][{outcome}] val_bpb {}→{} :: {}",
            fmt_metric(a),
            fmt_metric(b),
            idea(r, src)
        )
    };
    for (i, round) in rounds.iter().enumerate() {
        let r = i as u32 + 1;
        t.round_baselines.push(l_best);
        let mut candidates: Vec<(String, f64)> = vec![];
        for (k, w) in round.workers.iter().enumerate() {
            let src = format!("worker-{}", k + 1);
            if let Reply::Metric(l_k) = *w {
                if l_k < l_best {
                    candidates.push((src, l_k));
                } else {
                    t.memory.push(line(r, &src, "Failed", l_best, l_k));
                }
            }
        }
        if candidates.len() > 1 {
            t.coordinator_rounds.push(r);
            if let Some(Reply::Metric(l_m)) = round.merged {
                candidates.push(("coordinator".into(), l_m));
            }
        }
        // argmin keeping the earliest entry on ties (workers precede the merge)
        let mut best: Option<&(String, f64)> = None;
        for c in &candidates {
            if best.is_none_or(|b| c.1 < b.1) {
                best = Some(c);
            }
        }
        if let Some((src, l)) = best {
            t.memory.push(line(r, src, "Success", l_best, *l));
            t.promotions.push((r, src.clone(), *l));
            l_best = *l;
        }
    }
    t.final_metric = l_best;
    t
}

pub fn subagent_script(rounds: &[SubRound]) -> String {
    let trace = subagent_oracle(BASELINE, rounds);
    let mut b = ScriptBuilder::new();
    for (i, round) in rounds.iter().enumerate() {
        let r = i as u32 + 1;
        let cur = trace.round_baselines[i];
        for (k, w) in round.workers.iter().enumerate() {
            let src = format!("worker-{}", k + 1);
            b = b.reply(r, &src, 1, &reply_text(*w, &idea(r, &src), cur));
        }
        if let Some(m) = round.merged {
            b = b.reply(
                r,
                "coordinator",
                1,
                &reply_text(m, &idea(r, "coordinator"), cur),
            );
        }
    }
    b.build()
}

// ---- team fixture ----

pub const TEAM_ROLES: [&str; 3] = ["architect", "optimizer", "efficiency"];

/// Six expert slots per round; each entry is (search, replace) on the mock
/// script or `None` for a malformed reply. Round 1 ends in an injected crash
/// the engineer fixes, round 2 in one it cannot fix, round 3 improves without
/// help and round 4 trains but does not improve.
pub fn team_rounds() -> Vec<Vec<Option<(&'static str, &'static str)>>> {
    vec![
        vec![
            Some(("WINDOW_PATTERN=SSLL", "WINDOW_PATTERN=SLSL")),
            Some(("LEARNING_RATE=0.04", "LEARNING_RATE=0.03")),
            Some(("DEPTH=8", "DEPTH=10")),
            Some(("MLP_RATIO=4", "MLP_RATIO=3")),
            Some(("WARMDOWN_RATIO=0.50", "WARMDOWN_RATIO=0.40")),
            Some(("VAL_BPB=1.3500", "VAL_BPB=1.3100\nexit 3")),
        ],
        vec![
            Some(("WINDOW_PATTERN=SLSL", "WINDOW_PATTERN=SSSL")),
            Some(("LEARNING_RATE=0.05", "LEARNING_RATE=0.02")),
            Some(("DEPTH=10", "DEPTH=12")),
            Some(("MLP_RATIO=3", "MLP_RATIO=2")),
            None,
            Some(("VAL_BPB=1.3100", "VAL_BPB=1.2900\nexit 3")),
        ],
        vec![
            Some(("WINDOW_PATTERN=SLSL", "WINDOW_PATTERN=LLSL")),
            Some(("LEARNING_RATE=0.03", "LEARNING_RATE=0.025")),
            Some(("DEPTH=10", "DEPTH=9")),
            Some(("MLP_RATIO=3", "MLP_RATIO=4")),
            Some(("WARMDOWN_RATIO=0.40", "WARMDOWN_RATIO=0.45")),
            Some(("VAL_BPB=1.3100", "VAL_BPB=1.2800")),
        ],
        vec![
            Some(("WINDOW_PATTERN=LLSL", "WINDOW_PATTERN=LLLL")),
            Some(("LEARNING_RATE=0.025", "LEARNING_RATE=0.05")),
            Some(("DEPTH=9", "DEPTH=16")),
            Some(("MLP_RATIO=4", "MLP_RATIO=8")),
            Some(("WARMDOWN_RATIO=0.45", "WARMDOWN_RATIO=0.10")),
            Some(("VAL_BPB=1.2800", "VAL_BPB=1.3000")),
        ],
    ]
}

pub const TEAM_ENGINEER_FIX: (&str, &str) = ("VAL_BPB=1.3100\nexit 3\n", "VAL_BPB=1.3100\n");
pub const TEAM_ENGINEER_NON_FIX: (&str, &str) =
    ("# hyperparameters\n", "# hyperparameters (reviewed)\n");

pub fn team_script() -> String {
    let mut b = ScriptBuilder::new();
    for (i, slots) in team_rounds().iter().enumerate() {
        let r = i as u32 + 1;
        let mut seen: BTreeMap<&str, u32> = BTreeMap::new();
        for (t, slot) in slots.iter().enumerate() {
            let role = TEAM_ROLES[t % 3];
            let attempt = seen.entry(role).or_default();
            *attempt += 1;
            let idea = format!("r{r} {role} turn {}", t + 1);
            let body = match slot {
                Some((s, rep)) => edit_proposal(&idea, s, rep),
                None => format!("{idea}, but no edit fences\n"),
            };
            b = b.reply(r, role, *attempt, &body);
        }
    }
    b = b.reply(
        1,
        "engineer",
        1,
        &edit_proposal(
            "drop the stray exit",
            TEAM_ENGINEER_FIX.0,
            TEAM_ENGINEER_FIX.1,
        ),
    );
    b = b.reply(
        2,
        "engineer",
        1,
        &edit_proposal(
            "annotate the header",
            TEAM_ENGINEER_NON_FIX.0,
            TEAM_ENGINEER_NON_FIX.1,
        ),
    );
    b.build()
}

/// Splits the snapshots written by [`Fixture::trace_evals`].
pub fn eval_snapshots(log: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(log).unwrap_or_default();
    text.split("=== end of snapshot\n")
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

// ---- generators ----

pub mod gen {
    use autoresearch::patch::{Edit, Proposal, DIVIDER_MARKER, REPLACE_MARKER, SEARCH_MARKER};
    use proptest::prelude::*;

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z0-9]{1,8}", 1..8).prop_map(|w| w.join(" "))
    }

    /// Free text for the header sections: one or more lines, trimmed.
    pub fn prose() -> impl Strategy<Value = String> {
        proptest::collection::vec(words(), 1..3).prop_map(|l| l.join("\n"))
    }

    fn block_line() -> impl Strategy<Value = String> {
        "[ a-zA-Z0-9=<>_().:#\"'+*-]{0,30}".prop_filter("fence marker", |l| {
            l != SEARCH_MARKER && l != DIVIDER_MARKER && l != REPLACE_MARKER
        })
    }

    /// Newline-terminated block of `min..4` lines.
    pub fn block(min: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec(block_line(), min..4)
            .prop_map(|lines| lines.iter().map(|l| format!("{l}\n")).collect::<String>())
    }

    pub fn path() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z][a-z0-9_]{0,6}", 1..4)
            .prop_map(|segs| format!("{}.py", segs.join("/")))
    }

    pub fn edit() -> impl Strategy<Value = Edit> {
        (path(), block(1), block(0)).prop_map(|(target_file, search_block, replace_block)| Edit {
            target_file,
            search_block,
            replace_block,
        })
    }

    pub fn proposal() -> impl Strategy<Value = Proposal> {
        (prose(), prose(), proptest::collection::vec(edit(), 1..5)).prop_map(
            |(motivation, idea_summary, edits)| Proposal {
                motivation,
                idea_summary,
                edits,
            },
        )
    }

    /// Overlap-heavy texts for the occurrence law: small alphabet, short needles.
    pub fn text_and_needle() -> impl Strategy<Value = (String, String)> {
        ("[ab\n]{0,40}", "[ab\n]{1,4}")
    }

    /// Occurrences counted at every byte offset; ASCII inputs only.
    pub fn brute_force_count(text: &str, needle: &str) -> usize {
        let (t, n) = (text.as_bytes(), needle.as_bytes());
        if n.is_empty() || n.len() > t.len() {
            return 0;
        }
        (0..=t.len() - n.len())
            .filter(|&i| &t[i..i + n.len()] == n)
            .count()
    }
}

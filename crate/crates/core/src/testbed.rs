//! Throwaway target repositories for demos and tests.
//!
//! The mock workload is a POSIX shell script whose "training" prints a fixed
//! `val_bpb` line, so scripted agents can steer the metric by editing one
//! assignment. `sh -n` serves as the compile check.

use std::path::{Path, PathBuf};

use crate::config::{BackendKind, RunConfig, Topology};
use crate::repo::RepoError;

pub const TRAIN_SCRIPT: &str = "train.sh";

/// Baseline metric printed by [`mock_train_script`].
pub const BASELINE_VAL_BPB: &str = "1.3500";

/// A shell "training script": optional sleep, then one metric line.
pub fn mock_train_script(sleep_s: f64) -> String {
    format!(
        "#!/bin/sh\n\
         # hyperparameters\n\
         LEARNING_RATE=0.04\n\
         WARMDOWN_RATIO=0.50\n\
         WINDOW_PATTERN=SSLL\n\
         MLP_RATIO=4\n\
         DEPTH=8\n\
         SLEEP_S={sleep_s}\n\
         VAL_BPB={BASELINE_VAL_BPB}\n\
         \n\
         sleep \"$SLEEP_S\"\n\
         echo \"step 100 train_loss 2.31\"\n\
         echo \"val_bpb: $VAL_BPB\"\n"
    )
}

/// Creates a git repository at `path` on branch `main` holding `files` in one
/// commit with fixed dates, so the initial commit id is reproducible.
pub fn init_repo(path: impl AsRef<Path>, files: &[(&str, &str)]) -> Result<PathBuf, RepoError> {
    let path = path.as_ref();
    let io = |source| RepoError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(path).map_err(io)?;
    for (name, content) in files {
        let file = path.join(name);
        if let Some(parent) = file.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        std::fs::write(&file, content).map_err(io)?;
    }
    let git = |args: &[&str]| -> Result<(), RepoError> {
        let out = std::process::Command::new("git")
            .arg("-C")
            .arg(path)
            .args(args)
            .env("GIT_AUTHOR_NAME", "fixture")
            .env("GIT_AUTHOR_EMAIL", "fixture@localhost")
            .env("GIT_COMMITTER_NAME", "fixture")
            .env("GIT_COMMITTER_EMAIL", "fixture@localhost")
            .env("GIT_AUTHOR_DATE", "@1700000000 +0000")
            .env("GIT_COMMITTER_DATE", "@1700000000 +0000")
            .output()
            .map_err(RepoError::Spawn)?;
        if out.status.success() {
            Ok(())
        } else {
            Err(RepoError::Git {
                args: args.join(" "),
                stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            })
        }
    };
    git(&["init", "--quiet", "--initial-branch=main"])?;
    git(&["add", "-A"])?;
    git(&["commit", "--quiet", "--no-gpg-sign", "-m", "initial state"])?;
    std::fs::canonicalize(path).map_err(io)
}

/// Repository containing only the mock training script.
pub fn init_mock_target(path: impl AsRef<Path>, sleep_s: f64) -> Result<PathBuf, RepoError> {
    init_repo(path, &[(TRAIN_SCRIPT, &mock_train_script(sleep_s))])
}

/// Scripted-backend config wired to the mock workload.
pub fn mock_config(repo: &Path, script: &Path, out_dir: &Path, topology: Topology) -> RunConfig {
    let mut cfg = RunConfig {
        run_id: Some(format!("{topology}-fixture")),
        out_dir: out_dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.repo.path = repo.to_path_buf();
    cfg.repo.scratch_dir = Some(out_dir.join("worktrees"));
    cfg.repo.target_files = vec![TRAIN_SCRIPT.into()];
    cfg.topology.kind = topology;
    cfg.agents.backend = BackendKind::Scripted;
    cfg.agents.script = Some(script.to_path_buf());
    cfg.execution.preflight_command = vec!["sh".into(), "-n".into(), TRAIN_SCRIPT.into()];
    cfg.execution.eval_command = vec!["sh".into(), TRAIN_SCRIPT.into()];
    cfg.execution.eval_timeout_s = 10.0;
    cfg
}

/// Proposal with a single edit of the mock script.
pub fn edit_proposal(idea: &str, search: &str, replace: &str) -> String {
    let block = |t: &str| {
        if t.ends_with('\n') {
            t.to_string()
        } else {
            format!("{t}\n")
        }
    };
    format!(
        "MOTIVATION: {idea}\n\
         IDEA_SUMMARY: {idea}\n\
         \n\
         EDIT {TRAIN_SCRIPT}\n\
         <<<<<<< SEARCH\n\
         {}\
         =======\n\
         {}\
         >>>>>>> REPLACE\n",
        block(search),
        block(replace)
    )
}

/// One-edit proposal that rewrites the metric assignment in the mock script.
pub fn metric_proposal(idea: &str, from: &str, to: &str) -> String {
    edit_proposal(idea, &format!("VAL_BPB={from}"), &format!("VAL_BPB={to}"))
}

/// Proposal that makes the mock script exit with status 3 before reporting.
pub fn crash_proposal(idea: &str, from: &str) -> String {
    edit_proposal(
        idea,
        &format!("VAL_BPB={from}"),
        &format!("VAL_BPB={from}\nexit 3"),
    )
}

/// Proposal leaving an unterminated `if`, which `sh -n` rejects.
pub fn syntax_error_proposal(idea: &str, from: &str) -> String {
    edit_proposal(
        idea,
        &format!("VAL_BPB={from}"),
        &format!("VAL_BPB={from}\nif [ -n \"$VAL_BPB\" ]; then"),
    )
}

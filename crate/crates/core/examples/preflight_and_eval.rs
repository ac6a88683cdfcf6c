//! Runs the preflight gate and the training command against a good edit,
//! a syntax error and a crash.

use autoresearch::config::{ExecutionConfig, RunConfig, Topology};
use autoresearch::exec::Executor;
use autoresearch::patch::parse_proposal;
use autoresearch::repo::RepoHandle;
use autoresearch::testbed::{
    crash_proposal, init_mock_target, metric_proposal, mock_config, syntax_error_proposal,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let cfg: RunConfig = mock_config(
        &root,
        &dir.path().join("unused"),
        dir.path(),
        Topology::Single,
    );
    let exec_cfg: &ExecutionConfig = &cfg.execution;
    let executor = Executor::new(exec_cfg, 1)?;
    let repo = RepoHandle::open(&root, "main", Some(dir.path().join("scratch")))?;
    let base = repo.baseline_commit()?;

    let cases = [
        ("improves", metric_proposal("better", "1.3500", "1.3100")),
        ("syntax error", syntax_error_proposal("broken", "1.3500")),
        ("crash", crash_proposal("crash", "1.3500")),
    ];
    for (name, reply) in cases {
        let w = repo.create_worktree(&base, &format!("demo/{}", name.replace(' ', "-")))?;
        w.apply(&parse_proposal(&reply)?.edits)?;
        let pre = executor.preflight(&w)?;
        if !pre.passed {
            println!("{name:>12}: preflight failed at {:?}", pre.stage);
        } else {
            let out = executor.evaluate(&w);
            println!("{name:>12}: {:?} {}", out.status, out.describe());
        }
        repo.destroy_worktree(&w);
    }
    Ok(())
}

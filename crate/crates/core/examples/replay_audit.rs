//! Replays a finished run's accepted patch chain onto its starting commit
//! and checks that it reproduces the recorded final tree. Tampering with
//! the chain is reported as a divergence.

use autoresearch::agents::ScriptBuilder;
use autoresearch::config::Topology;
use autoresearch::repo::RepoHandle;
use autoresearch::telemetry::{replay, RunReport, SUMMARY_FILE};
use autoresearch::testbed::{init_mock_target, metric_proposal, mock_config};
use autoresearch::topology;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let script = ScriptBuilder::new()
        .reply(
            1,
            "worker",
            1,
            &metric_proposal("lower lr", "1.3500", "1.3300"),
        )
        .reply(
            2,
            "worker",
            1,
            &metric_proposal("wider mlp", "1.3300", "1.3100"),
        )
        .build();
    let script_path = dir.path().join("replies.script");
    std::fs::write(&script_path, script)?;
    let mut cfg = mock_config(
        &root,
        &script_path,
        &dir.path().join("runs"),
        Topology::Single,
    );
    cfg.budget.max_rounds = Some(2);
    let run = topology::run(cfg)?;

    // everything needed lives in summary.json
    let report = RunReport::load(&run.config.out_dir.join(&run.run_id).join(SUMMARY_FILE))?;
    let repo = RepoHandle::open(&root, "main", Some(dir.path().join("replay")))?;
    let commit = replay(&report, &repo)?;
    println!(
        "replayed {} promotions: {} (recorded {})",
        report.accepted_patch_chain.len(),
        commit,
        report.final_commit
    );

    let mut tampered = report.clone();
    tampered.accepted_patch_chain.remove(0);
    match replay(&tampered, &repo) {
        Err(e) => println!("tampered chain: {e}"),
        Ok(_) => println!("tampered chain replayed cleanly?"),
    }
    Ok(())
}

//! A three-round single-agent run against the mock workload with scripted
//! agent replies. Swap `agents.backend` to "http" for a real model.

use autoresearch::agents::ScriptBuilder;
use autoresearch::config::Topology;
use autoresearch::testbed::{crash_proposal, init_mock_target, metric_proposal, mock_config};
use autoresearch::topology;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let script = ScriptBuilder::new()
        .reply(
            1,
            "worker",
            1,
            &metric_proposal("lower lr", "1.3500", "1.3200"),
        )
        .reply(2, "worker", 1, &crash_proposal("fused kernel", "1.3200"))
        .reply(
            3,
            "worker",
            1,
            &metric_proposal("earlier warmdown", "1.3200", "1.2900"),
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
    cfg.budget.max_rounds = Some(3);
    let report = topology::run(cfg)?;

    println!(
        "{} rounds, {} promotions, val_bpb {:.4} -> {:.4}",
        report.rounds_executed, report.promotions, report.baseline_metric, report.final_metric
    );
    for (state, n) in &report.state_counts {
        println!("  {state}: {n}");
    }
    Ok(())
}

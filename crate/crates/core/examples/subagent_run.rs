//! Three workers explore in parallel each round. When more than one of them
//! improves, the coordinator is asked to merge their edits.

use autoresearch::agents::ScriptBuilder;
use autoresearch::config::Topology;
use autoresearch::testbed::{init_mock_target, metric_proposal, mock_config};
use autoresearch::topology;

// combines both improving ideas in one patch
const MERGED: &str = "\
MOTIVATION: the two wins touch different knobs
IDEA_SUMMARY: lower lr + wider mlp
EDIT train.sh
<<<<<<< SEARCH
MLP_RATIO=4
=======
MLP_RATIO=5
>>>>>>> REPLACE
EDIT train.sh
<<<<<<< SEARCH
VAL_BPB=1.3500
=======
VAL_BPB=1.3000
>>>>>>> REPLACE
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let script = ScriptBuilder::new()
        .reply(
            1,
            "worker-1",
            1,
            &metric_proposal("lower lr", "1.3500", "1.3300"),
        )
        .reply(
            1,
            "worker-2",
            1,
            &metric_proposal("wider mlp", "1.3500", "1.3200"),
        )
        .reply(
            1,
            "worker-3",
            1,
            &metric_proposal("deeper", "1.3500", "1.3800"),
        )
        .reply(1, "coordinator", 1, MERGED)
        .build();
    let script_path = dir.path().join("replies.script");
    std::fs::write(&script_path, script)?;

    let mut cfg = mock_config(
        &root,
        &script_path,
        &dir.path().join("runs"),
        Topology::Subagent,
    );
    cfg.topology.k = 3;
    cfg.budget.max_rounds = Some(1);
    let report = topology::run(cfg)?;

    for entry in &report.accepted_patch_chain {
        println!(
            "round {} promoted from {}: {}",
            entry.round, entry.source, entry.idea_summary
        );
    }
    println!(
        "val_bpb {:.4} -> {:.4}",
        report.baseline_metric, report.final_metric
    );
    Ok(())
}

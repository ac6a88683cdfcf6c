//! One agent-team round: architect, optimizer and efficiency expert take
//! turns on a shared working copy. The chat result crashes and the engineer
//! repairs it before the single training run that decides promotion.

use autoresearch::agents::ScriptBuilder;
use autoresearch::config::Topology;
use autoresearch::testbed::{edit_proposal, init_mock_target, mock_config};
use autoresearch::topology;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let script = ScriptBuilder::new()
        .reply(
            1,
            "architect",
            1,
            &edit_proposal(
                "sssl windows",
                "WINDOW_PATTERN=SSLL\n",
                "WINDOW_PATTERN=SSSL\n",
            ),
        )
        .reply(
            1,
            "optimizer",
            1,
            &edit_proposal("lower lr", "LEARNING_RATE=0.04\n", "LEARNING_RATE=0.03\n"),
        )
        .reply(
            1,
            "efficiency",
            1,
            &edit_proposal("skip eval", "VAL_BPB=1.3500\n", "VAL_BPB=1.3000\nexit 1\n"),
        )
        .reply(
            1,
            "engineer",
            1,
            &edit_proposal("drop early exit", "exit 1\n", ""),
        )
        .build();
    let script_path = dir.path().join("replies.script");
    std::fs::write(&script_path, script)?;

    let mut cfg = mock_config(
        &root,
        &script_path,
        &dir.path().join("runs"),
        Topology::Team,
    );
    cfg.topology.turns = 3;
    cfg.budget.max_rounds = Some(1);
    let report = topology::run(cfg)?;

    let run_dir = report.config.out_dir.join(&report.run_id);
    println!(
        "val_bpb {:.4} -> {:.4}",
        report.baseline_metric, report.final_metric
    );
    for file in ["program_exp.md", "program_meta.md"] {
        println!("{}", std::fs::read_to_string(run_dir.join(file))?);
    }
    Ok(())
}

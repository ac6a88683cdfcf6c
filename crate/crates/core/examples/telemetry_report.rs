//! Runs a short experiment, then rebuilds the outcome tables from the
//! event log alone, the same way `autoresearch report` does.

use autoresearch::agents::ScriptBuilder;
use autoresearch::cli::format_tables;
use autoresearch::config::Topology;
use autoresearch::telemetry::{aggregate, export, read_log, EVENTS_FILE};
use autoresearch::testbed::{
    init_mock_target, metric_proposal, mock_config, syntax_error_proposal,
};
use autoresearch::topology;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = init_mock_target(dir.path().join("target"), 0.0)?;
    let script = ScriptBuilder::new()
        .reply(1, "worker", 1, "I would try a bigger model.")
        .reply(2, "worker", 1, &syntax_error_proposal("refactor", "1.3500"))
        .reply(
            3,
            "worker",
            1,
            &metric_proposal("lower lr", "1.3500", "1.3300"),
        )
        .reply(
            4,
            "worker",
            1,
            &metric_proposal("higher lr", "1.3300", "1.3400"),
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
    cfg.budget.max_rounds = Some(4);
    let report = topology::run(cfg)?;

    let run_dir = report.config.out_dir.join(&report.run_id);
    let tables = aggregate(&read_log(&run_dir.join(EVENTS_FILE))?);
    print!("{}", format_tables(&tables));

    let out = dir.path().join("tables");
    std::fs::create_dir_all(&out)?;
    export(&out, &tables, None)?;
    println!("\n{}", std::fs::read_to_string(out.join("report.csv"))?);
    Ok(())
}

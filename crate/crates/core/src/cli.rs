//! Command-line front end: `run`, `report`, `replay` and `init`.
//!
//! Any flag whose name contains a dot (`--budget.t_max_s 600`,
//! `--execution.eval_timeout_s=90`) overrides that config key.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::agents::Prompts;
use crate::config::{parse_override, BackendKind, ConfigError, RunConfig, Topology};
use crate::repo::RepoHandle;
use crate::telemetry::{self, aggregate, read_log, LifecycleState, RunReport, RunTables};
use crate::topology::{self, RunError};

#[derive(Debug, Parser)]
#[command(
    name = "autoresearch",
    version,
    about = "Budget-bounded agent search over code edits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one search under a wall-clock budget.
    Run(RunArgs),
    /// Rebuild state and progress tables from a run's event log.
    Report {
        /// Run directory or events.jsonl file.
        path: PathBuf,
        /// Where to write report.csv and progress.csv (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-apply a run's accepted patch chain and check it reproduces the final tree.
    Replay {
        /// Run directory or summary.json file.
        path: PathBuf,
        /// Target repository (defaults to the one recorded in the summary).
        #[arg(long)]
        repo: Option<PathBuf>,
    },
    /// Write a starter config and editable prompt templates.
    Init {
        #[arg(default_value = ".")]
        dir: PathBuf,
        #[arg(long, default_value = "single")]
        topology: Topology,
        /// Target repository path to put in the config.
        #[arg(long)]
        repo: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<Topology>,
    #[arg(long = "t-max-s")]
    pub t_max_s: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "run-id")]
    pub run_id: Option<String>,
    #[arg(long)]
    pub repo: Option<PathBuf>,
    /// Extra `key=value` overrides (dotted config keys).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "http" => Ok(BackendKind::Http),
        "scripted" => Ok(BackendKind::Scripted),
        other => Err(format!("unknown backend `{other}` (http, scripted)")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Telemetry(#[from] telemetry::TelemetryError),
    #[error(transparent)]
    Replay(#[from] telemetry::ReplayError),
    #[error(transparent)]
    Repo(#[from] crate::repo::RepoError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Replay(telemetry::ReplayError::Divergence { .. }) => 3,
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Overrides = Vec<(String, String)>;

/// Splits dotted `--a.b value` / `--a.b=value` flags out of `args`.
pub fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Resolves the effective config: file, then named flags, then overrides.
pub fn resolve_config(args: &RunArgs, dotted: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(t) = args.topology {
        put("topology.kind", t.to_string());
    }
    if let Some(t) = args.t_max_s {
        put("budget.t_max_s", t.to_string());
    }
    if let Some(k) = args.k {
        put("topology.k", k.to_string());
    }
    if let Some(n) = args.turns {
        put("topology.turns", n.to_string());
    }
    if let Some(s) = args.seed {
        put("seed", s.to_string());
    }
    if let Some(b) = args.backend {
        put(
            "agents.backend",
            match b {
                BackendKind::Http => "http",
                BackendKind::Scripted => "scripted",
            }
            .to_string(),
        );
    }
    let path_str = |p: &Path| p.to_string_lossy().into_owned();
    if let Some(p) = &args.script {
        put("agents.script", path_str(p));
    }
    if let Some(p) = &args.out {
        put("out_dir", path_str(p));
    }
    if let Some(id) = &args.run_id {
        put("run_id", id.clone());
    }
    if let Some(p) = &args.repo {
        put("repo.path", path_str(p));
    }
    for s in &args.set {
        overrides.push(parse_override(s)?);
    }
    overrides.extend(dotted.iter().cloned());
    Ok(RunConfig::load(args.config.as_deref(), &overrides)?)
}

fn locate(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

pub fn format_tables(t: &RunTables) -> String {
    let mut out = String::from("state               count   ratio\n");
    let ratios = t.ratios();
    for s in LifecycleState::ALL {
        let n = t.state_counts.get(&s).copied().unwrap_or(0);
        let r = ratios.get(&s).copied().unwrap_or(0.0);
        out.push_str(&format!("{:<18} {n:>6}  {r:>6.3}\n", s.to_string()));
    }
    out.push_str(&format!(
        "total              {:>6}\n\n",
        t.total_proposals()
    ));
    out.push_str("round  elapsed_s  best_val_bpb  delta\n");
    for p in &t.progress {
        out.push_str(&format!(
            "{:>5}  {:>9.1}  {:>12.4}  {:+.4}\n",
            p.round, p.elapsed_s, p.best_metric, p.delta_val_bpb
        ));
    }
    out
}

fn cmd_run(
    args: RunArgs,
    dotted: &[(String, String)],
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = resolve_config(&args, dotted)?;
    let report = topology::run(cfg)?;
    let run_dir = report.config.out_dir.join(&report.run_id);
    let _ = writeln!(
        out,
        "run {} ({}): {} rounds, {} promotions, val_bpb {:.4} -> {:.4} (delta {:+.4})\nartifacts in {}",
        report.run_id,
        report.topology,
        report.rounds_executed,
        report.promotions,
        report.baseline_metric,
        report.final_metric,
        report.delta_val_bpb,
        run_dir.display()
    );
    Ok(())
}

fn cmd_report(path: &Path, dest: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let events = locate(path, telemetry::EVENTS_FILE);
    let tables = aggregate(&read_log(&events)?);
    let dir = match dest {
        Some(d) => d.to_path_buf(),
        None => events.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    telemetry::export(&dir, &tables, None)?;
    let _ = write!(out, "{}", format_tables(&tables));
    Ok(())
}

fn cmd_replay(path: &Path, repo: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let report = RunReport::load(&locate(path, telemetry::SUMMARY_FILE))?;
    let root = repo.map_or_else(|| report.config.repo.path.clone(), Path::to_path_buf);
    let handle = RepoHandle::open(&root, &report.config.repo.main_branch, None)?;
    let commit = telemetry::replay(&report, &handle)?;
    handle.cleanup();
    let _ = writeln!(
        out,
        "replayed {} promotions from {}: final tree {} (commit {}{})",
        report.accepted_patch_chain.len(),
        report.initial_commit,
        report.final_tree,
        commit,
        if commit == report.final_commit {
            ", identical to the recorded run"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_init(
    dir: &Path,
    topology: Topology,
    repo: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let config_path = dir.join("autoresearch.toml");
    if config_path.exists() {
        return Err(CliError::Usage(format!(
            "{} already exists",
            config_path.display()
        )));
    }
    let mut cfg = RunConfig::default();
    cfg.topology.kind = topology;
    if let Some(r) = repo {
        cfg.repo.path = r.to_path_buf();
    }
    cfg.agents.prompt_dir = Some(PathBuf::from("prompts"));
    std::fs::write(&config_path, cfg.to_toml_string()?).map_err(io(&config_path))?;
    let prompts = dir.join("prompts");
    Prompts::default()
        .write_to(&prompts)
        .map_err(io(&prompts))?;
    let _ = writeln!(
        out,
        "wrote {} and {}/",
        config_path.display(),
        prompts.display()
    );
    Ok(())
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable output to `out`.
pub fn run_with_args(args: Vec<String>, out: &mut dyn Write) -> Result<(), CliError> {
    let (rest, dotted) = extract_dotted(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    if !dotted.is_empty() && !matches!(cli.command, Command::Run(_)) {
        return Err(CliError::Usage(
            "config overrides only apply to `run`".into(),
        ));
    }
    match cli.command {
        Command::Run(args) => cmd_run(args, &dotted, out),
        Command::Report { path, out: dest } => cmd_report(&path, dest.as_deref(), out),
        Command::Replay { path, repo } => cmd_replay(&path, repo.as_deref(), out),
        Command::Init {
            dir,
            topology,
            repo,
        } => cmd_init(&dir, topology, repo.as_deref(), out),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    let mut stdout = std::io::stdout();
    match run_with_args(args, &mut stdout) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprint!("{msg}");
            if !msg.ends_with('\n') {
                eprintln!();
            }
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

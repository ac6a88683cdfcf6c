//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always show.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use autoresearch::agents::{Role, ScriptBuilder, ScriptedBackend};
use autoresearch::config::{RunConfig, Topology};
use autoresearch::patch::{apply_edits, parse_proposal, render_proposal, ApplyErrorKind, Edit};
use autoresearch::repo::RepoHandle;
use autoresearch::telemetry::{
    aggregate, normalize_log, replay, LifecycleState, LogRecord, ReplayError, RunReport,
    EVENTS_FILE,
};
use autoresearch::testbed::{init_mock_target, TRAIN_SCRIPT};
use autoresearch::topology::{accept, Verdict};
use common::gen;
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<(), String>;
type Criterion = fn(&mut Gate) -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn within(start: Instant, limit_s: f64) -> Outcome {
    let took = start.elapsed().as_secs_f64();
    ensure!(took < limit_s, "took {took:.2}s, limit {limit_s}s");
    Ok(())
}

/// Scripted runs kept alive for the replay and determinism checks.
struct Completed {
    label: &'static str,
    report: RunReport,
    fixture: Fixture,
    calls: usize,
}

#[derive(Default)]
struct Gate {
    runs: Vec<Completed>,
}

impl Gate {
    fn run(
        &mut self,
        label: &'static str,
        fixture: Fixture,
        cfg: RunConfig,
    ) -> Result<(RunReport, Arc<ScriptedBackend>), String> {
        let (report, backend) = run_scripted(cfg).map_err(|e| format!("{label}: {e}"))?;
        self.runs.push(Completed {
            label,
            report: report.clone(),
            fixture,
            calls: backend.calls().len(),
        });
        Ok((report, backend))
    }
}

fn single_cfg(fx: &Fixture) -> RunConfig {
    let mut cfg = fx.config(Topology::Single);
    cfg.budget.max_rounds = Some(SINGLE_METRICS.len() as u32);
    cfg
}

fn subagent_cfg(fx: &Fixture) -> RunConfig {
    let mut cfg = fx.config(Topology::Subagent);
    cfg.topology.k = 3;
    cfg.budget.max_rounds = Some(subagent_rounds().len() as u32);
    cfg
}

fn team_cfg(fx: &Fixture) -> RunConfig {
    let mut cfg = fx.config(Topology::Team);
    cfg.topology.turns = 6;
    cfg.topology.roles = vec![Role::Architect, Role::Optimizer, Role::Efficiency];
    cfg.budget.max_rounds = Some(team_rounds().len() as u32);
    cfg
}

// ---------------------------------------------------------------------------

fn acceptance_rule(_: &mut Gate) -> Outcome {
    let start = Instant::now();
    ensure!(
        accept(1.20, 1.25) == Verdict::Accepted,
        "1.20 vs 1.25 not accepted"
    );
    ensure!(accept(1.25, 1.25) == Verdict::Rejected, "tie accepted");
    ensure!(
        accept(f64::NAN, 1.25) == Verdict::NonFinite,
        "NaN not flagged"
    );
    ensure!(
        accept(f64::INFINITY, 1.25) == Verdict::NonFinite,
        "inf not flagged"
    );

    let oracle = |new: f64, best: f64| new.is_finite() && new < best;
    let case = (0.5f64..2.0, 0u8..6, 0.5f64..2.0).prop_map(|(best, kind, other)| {
        let new = match kind {
            0 => best,
            1 => f64::NAN,
            2 => f64::INFINITY,
            3 => f64::NEG_INFINITY,
            _ => other,
        };
        (new, best)
    });
    let agreed = std::cell::Cell::new(0u32);
    runner(10_000)
        .run(&case, |(new, best)| {
            prop_assert_eq!(
                accept(new, best).accepted(),
                oracle(new, best),
                "new={} best={}",
                new,
                best
            );
            agreed.set(agreed.get() + 1);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure!(agreed.get() == 10_000, "only {} cases ran", agreed.get());
    within(start, 1.0)
}

fn patch_contract(_: &mut Gate) -> Outcome {
    let start = Instant::now();
    let generated = std::cell::Cell::new(0u32);
    runner(1000)
        .run(&gen::proposal(), |p| {
            generated.set(generated.get() + 1);
            let text = render_proposal(&p);
            let back =
                parse_proposal(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(back, p);
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;
    ensure!(
        generated.get() >= 1000,
        "only {} proposals generated",
        generated.get()
    );

    runner(2000)
        .run(&gen::text_and_needle(), |(text, needle)| {
            let files = BTreeMap::from([("f.txt".to_string(), text.clone())]);
            let edit = Edit {
                target_file: "f.txt".into(),
                search_block: needle.clone(),
                replace_block: "<X>".into(),
            };
            let n = gen::brute_force_count(&text, &needle);
            match apply_edits(&files, &[edit]) {
                Ok(out) => {
                    prop_assert_eq!(n, 1);
                    let at = (0..text.len())
                        .find(|&i| text[i..].starts_with(&needle))
                        .unwrap();
                    let expect = format!("{}<X>{}", &text[..at], &text[at + needle.len()..]);
                    prop_assert_eq!(&out["f.txt"], &expect);
                }
                Err(e) => match e.kind {
                    ApplyErrorKind::NoMatch => prop_assert_eq!(n, 0),
                    ApplyErrorKind::Ambiguous { occurrences } => {
                        prop_assert!(n >= 2);
                        prop_assert_eq!(occurrences, n);
                    }
                    ApplyErrorKind::UnknownFile => prop_assert!(false, "unknown file"),
                },
            }
            Ok(())
        })
        .map_err(|e| format!("single-occurrence law: {e}"))?;

    // all-or-nothing, checked on disk by hashing the worktree
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let repo_path = init_mock_target(dir.path().join("target"), 0.0).map_err(|e| e.to_string())?;
    let repo = RepoHandle::open(&repo_path, "main", Some(dir.path().join("wt")))
        .map_err(|e| e.to_string())?;
    let base = repo.baseline_commit().map_err(|e| e.to_string())?;
    let w = repo
        .create_worktree(&base, "atomic")
        .map_err(|e| e.to_string())?;
    let before = tree_digest(&w.path);
    let script = std::fs::read_to_string(w.path.join(TRAIN_SCRIPT)).map_err(|e| e.to_string())?;
    let lines: Vec<String> = script
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| format!("{l}\n"))
        .collect();
    let lines_ref = &lines;
    let batch = (
        proptest::collection::vec(0..lines.len(), 0..4),
        0usize..4,
        gen::block(1),
    )
        .prop_map(move |(good, fail_at, junk)| {
            let mut edits: Vec<Edit> = good
                .iter()
                .map(|&i| Edit {
                    target_file: TRAIN_SCRIPT.into(),
                    search_block: lines_ref[i].clone(),
                    replace_block: format!("# edited {i}\n"),
                })
                .collect();
            // a block that cannot occur in the script
            let bad = Edit {
                target_file: TRAIN_SCRIPT.into(),
                search_block: format!("@@absent@@{junk}"),
                replace_block: String::new(),
            };
            edits.insert(fail_at.min(edits.len()), bad);
            edits
        });
    let result = runner(200).run(&batch, |edits| {
        prop_assert!(w.apply(&edits).is_err());
        prop_assert_eq!(&tree_digest(&w.path), &before);
        Ok(())
    });
    repo.destroy_worktree(&w);
    result.map_err(|e| format!("atomicity: {e}"))?;
    within(start, 30.0)
}

fn isolation(_: &mut Gate) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let repo_path = init_mock_target(dir.path().join("target"), 0.0).map_err(|e| e.to_string())?;
    let repo = RepoHandle::open(&repo_path, "main", Some(dir.path().join("wt")))
        .map_err(|e| e.to_string())?;
    let base = repo.baseline_commit().map_err(|e| e.to_string())?;
    let main_before = tree_digest(&repo_path);
    let base_digest = main_before.clone();

    let file = prop_oneof![
        Just(TRAIN_SCRIPT.to_string()),
        "notes/[a-z]{1,6}\\.txt",
        "[a-z]{1,6}\\.cfg"
    ];
    let writes = proptest::collection::vec((file, "[ -~]{0,64}"), 1..5);
    let trials = std::cell::Cell::new(0u32);
    let trial = std::cell::Cell::new(0u32);
    runner(100)
        .run(&proptest::collection::vec(writes, 3), |per_worker| {
            let t = trial.get();
            trial.set(t + 1);
            let handles: Vec<_> = (0..3)
                .map(|k| repo.create_worktree(&base, &format!("t{t}/w{k}")).unwrap())
                .collect();
            let mut expected = Vec::new();
            for (w, writes) in handles.iter().zip(&per_worker) {
                let mut digest = base_digest.clone();
                for (name, content) in writes {
                    let path = w.path.join(name);
                    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                    std::fs::write(&path, content).unwrap();
                    let one = tree_digest(path.parent().unwrap());
                    let key = path.file_name().unwrap().to_string_lossy().into_owned();
                    digest.insert(name.clone(), one[&key].clone());
                }
                expected.push(digest);
            }
            let mut ok = Ok(());
            for (k, w) in handles.iter().enumerate() {
                if tree_digest(&w.path) != expected[k] {
                    ok = Err(TestCaseError::fail(format!(
                        "worktree {k} sees foreign writes"
                    )));
                }
            }
            if tree_digest(&repo_path) != main_before {
                ok = Err(TestCaseError::fail("main checkout changed"));
            }
            for w in &handles {
                repo.destroy_worktree(w);
            }
            trials.set(trials.get() + 1);
            ok
        })
        .map_err(|e| e.to_string())?;
    ensure!(trials.get() == 100, "ran {} trials", trials.get());
    ensure!(repo.live_worktrees().is_empty(), "worktrees left behind");
    within(start, 60.0)
}

fn subagent_trace_equivalence(gate: &mut Gate) -> Outcome {
    let start = Instant::now();
    let rounds = subagent_rounds();
    let oracle = subagent_oracle(BASELINE, &rounds);
    let fx = Fixture::new(0.0, &subagent_script(&rounds));
    let cfg = subagent_cfg(&fx);
    let (report, backend) = gate.run("subagent", fx, cfg)?;

    let promotions: Vec<(u32, String, f64)> = records(&report)
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Promotion(p) => Some((p.round, p.source, p.metric_after)),
            _ => None,
        })
        .collect();
    ensure!(
        promotions == oracle.promotions,
        "promotions {promotions:?} != {:?}",
        oracle.promotions
    );
    let memory = exp_entries(&report);
    ensure!(
        memory == oracle.memory,
        "memory {memory:#?} != {:#?}",
        oracle.memory
    );
    ensure!(
        report.final_metric == oracle.final_metric,
        "final {} != {}",
        report.final_metric,
        oracle.final_metric
    );
    ensure!(
        oracle.promotions.first().map(|p| (p.1.as_str(), p.2)) == Some(("coordinator", 1.26))
            && report.final_metric == 1.23,
        "fixture no longer exercises the merge"
    );

    let calls = backend.calls();
    let coordinator_rounds: Vec<u32> = calls
        .iter()
        .filter(|c| c.role == Role::Coordinator)
        .map(|c| c.key.round)
        .collect();
    ensure!(
        coordinator_rounds == oracle.coordinator_rounds,
        "coordinator fired in {coordinator_rounds:?}, expected {:?}",
        oracle.coordinator_rounds
    );
    for (i, _) in rounds.iter().enumerate() {
        let r = i as u32 + 1;
        let n = calls.iter().filter(|c| c.key.round == r).count();
        let expect = 3 + usize::from(oracle.coordinator_rounds.contains(&r));
        ensure!(
            n == expect,
            "round {r}: {n} propose calls, expected {expect}"
        );
    }
    // round 3: merged 1.23 ties worker-2 1.23, worker wins
    let r3 = report.accepted_patch_chain.iter().find(|c| c.round == 3);
    ensure!(
        r3.map(|c| c.source.as_str()) == Some("worker-2"),
        "merged tie did not lose: {r3:?}"
    );
    within(start, 60.0)
}

fn team_trace_equivalence(gate: &mut Gate) -> Outcome {
    let start = Instant::now();
    let fx = Fixture::new(0.0, &team_script());
    let mut cfg = team_cfg(&fx);
    let eval_log = fx.trace_evals(&mut cfg);
    let (report, backend) = gate.run("team", fx, cfg)?;
    let calls = backend.calls();
    let n_rounds = team_rounds().len() as u32;
    ensure!(
        report.rounds_executed == n_rounds,
        "{} rounds",
        report.rounds_executed
    );

    for r in 1..=n_rounds {
        let experts: Vec<_> = calls
            .iter()
            .filter(|c| c.key.round == r && c.role.is_expert())
            .collect();
        ensure!(
            experts.len() == 6,
            "round {r}: {} expert slots",
            experts.len()
        );
        for (t, c) in experts.iter().enumerate() {
            let want = TEAM_ROLES[t % 3];
            ensure!(
                c.role.as_str() == want,
                "round {r} slot {}: {} instead of {want}",
                t + 1,
                c.role
            );
            let handoff_entries = c.user.matches("### Turn ").count();
            ensure!(
                handoff_entries == t,
                "round {r} slot {}: handoff has {handoff_entries} entries, expected {t}",
                t + 1
            );
        }
        let engineer = calls
            .iter()
            .filter(|c| c.key.round == r && c.role == Role::Engineer)
            .count();
        let expect = usize::from(r <= 2);
        ensure!(
            engineer == expect,
            "round {r}: engineer called {engineer} times, expected {expect}"
        );
    }

    // training happens once per chat (plus once after an engineer edit), on the full chat result
    let snaps = eval_snapshots(&eval_log);
    ensure!(
        snaps.len() == 7,
        "{} training runs, expected baseline + 2 + 2 + 1 + 1",
        snaps.len()
    );
    for (_, replace) in team_rounds()[0].iter().flatten() {
        ensure!(
            snaps[1].contains(replace),
            "first round-1 training missed `{replace}`"
        );
    }
    ensure!(
        snaps[1].contains("exit 3") && !snaps[2].contains("exit 3"),
        "engineer fix not trained second"
    );

    let events = proposal_events(&report);
    let eng: Vec<_> = events.iter().filter(|e| e.source == "engineer").collect();
    ensure!(eng.len() == 2, "{} engineer events", eng.len());
    ensure!(
        eng[0].round == 1
            && eng[0].state == LifecycleState::TrainingSuccess
            && eng[0].metric == Some(1.31),
        "engineer fix did not train successfully: {:?}",
        eng[0]
    );
    ensure!(
        eng[1].round == 2 && eng[1].state == LifecycleState::TrainingCrash,
        "round 2 engineer: {:?}",
        eng[1]
    );

    let meta = meta_entries(&report);
    let unresolvable: Vec<_> = meta
        .iter()
        .filter(|m| m.contains("[Unresolvable crash]"))
        .collect();
    ensure!(
        unresolvable.len() == 1 && unresolvable[0].starts_with("- [round 2][team][engineer]"),
        "meta: {meta:#?}"
    );
    ensure!(
        meta.iter()
            .filter(|m| m.contains("[Effective collaboration]"))
            .count()
            == 2,
        "meta: {meta:#?}"
    );
    let promoted: Vec<u32> = report
        .accepted_patch_chain
        .iter()
        .map(|c| c.round)
        .collect();
    ensure!(promoted == vec![1, 3], "promoted rounds {promoted:?}");
    ensure!(report.final_metric == 1.28, "final {}", report.final_metric);
    let exp = exp_entries(&report);
    ensure!(
        exp.len() == 3
            && exp[0].contains("[Success]")
            && exp[1].contains("[Success]")
            && exp[2].contains("[Failed] val_bpb 1.2800→1.3000"),
        "exp memory {exp:#?}"
    );
    within(start, 60.0)
}

fn lifecycle_taxonomy(gate: &mut Gate) -> Outcome {
    use LifecycleState::*;
    let replies = [
        Reply::Malformed,
        Reply::Syntax,
        Reply::Crash,
        Reply::Metric(1.30),
    ];
    let mut b = ScriptBuilder::new();
    for (i, r) in replies.iter().enumerate() {
        let round = i as u32 + 1;
        b = b.reply(
            round,
            "worker",
            1,
            &reply_text(*r, &format!("r{round} worker"), BASELINE),
        );
    }
    let fx = Fixture::new(0.0, &b.build());
    let mut cfg = fx.config(Topology::Single);
    cfg.run_id = Some("lifecycle-fixture".into());
    cfg.budget.max_rounds = Some(4);
    let (report, backend) = gate.run("lifecycle", fx, cfg)?;
    let events = proposal_events(&report);
    let states: Vec<LifecycleState> = events.iter().map(|e| e.state).collect();
    let expect = vec![
        ProposalFailure,
        PreflightFailure,
        TrainingCrash,
        TrainingSuccess,
    ];
    ensure!(states == expect, "states {states:?}");
    for e in &events {
        ensure!(
            (e.state == TrainingSuccess) == e.metric.is_some(),
            "metric/state mismatch: {e:?}"
        );
    }
    ensure!(
        backend.calls().len() == events.len(),
        "{} calls, {} events",
        backend.calls().len(),
        events.len()
    );

    // every run so far: one event per propose call, ratios close
    for run in &gate.runs {
        let recs = records(&run.report);
        let tables = aggregate(&recs);
        let sum: f64 = tables.ratios().values().sum();
        ensure!(
            (sum - 1.0).abs() <= 1e-9,
            "{}: ratios sum to {sum}",
            run.label
        );
        let logged = tables.total_proposals();
        ensure!(
            logged == run.calls,
            "{}: {} agent calls but {logged} proposal events",
            run.label,
            run.calls
        );
        let summed: usize = run.report.state_counts.values().sum();
        ensure!(summed == logged, "{}: summary and log disagree", run.label);
    }
    Ok(())
}

fn budget_compliance(gate: &mut Gate) -> Outcome {
    let mut b = ScriptBuilder::new();
    for r in 1..=20 {
        b = b.reply(
            r,
            "worker",
            1,
            &reply_text(Reply::Metric(1.40), &format!("r{r} worker"), BASELINE),
        );
    }
    let fx = Fixture::new(2.0, &b.build());
    let mut cfg = fx.config(Topology::Single);
    cfg.run_id = Some("budget-fixture".into());
    cfg.budget.t_max_s = 5;
    let (report, _) = gate.run("budget", fx, cfg)?;
    let recs = records(&report);
    let starts: Vec<f64> = recs
        .iter()
        .filter_map(|r| match r {
            LogRecord::RoundStart { elapsed_s, .. } => Some(*elapsed_s),
            _ => None,
        })
        .collect();
    ensure!(!starts.is_empty(), "no round started");
    ensure!(
        starts.iter().all(|s| *s < 5.0),
        "round started after the budget: {starts:?}"
    );
    ensure!(
        starts.len() <= 3,
        "{} rounds of a 2 s eval fit in 5 s?",
        starts.len()
    );

    for t in [300u64, 600] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::default();
        cfg.budget.t_max_s = t;
        std::fs::write(&path, cfg.to_toml_string().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let back = RunConfig::load(Some(&path), &[]).map_err(|e| e.to_string())?;
        ensure!(
            back == cfg && back.budget.t_max_s == t,
            "t_max {t} did not round-trip"
        );
        let over = RunConfig::load(
            Some(&path),
            &[("budget.t_max_s".into(), (900 - t).to_string())],
        )
        .map_err(|e| e.to_string())?;
        ensure!(over.budget.t_max_s == 900 - t, "dotted override ignored");
    }
    Ok(())
}

fn replay_fidelity(gate: &mut Gate) -> Outcome {
    ensure!(
        gate.runs.len() >= 5,
        "only {} scripted runs recorded",
        gate.runs.len()
    );
    for run in &gate.runs {
        let repo = RepoHandle::open(
            &run.fixture.repo,
            "main",
            Some(run.fixture.dir.path().join("replay")),
        )
        .map_err(|e| e.to_string())?;
        let commit = replay(&run.report, &repo).map_err(|e| format!("{}: {e}", run.label))?;
        let tree = repo.tree_of(&commit).map_err(|e| e.to_string())?;
        ensure!(
            tree == run.report.final_tree,
            "{}: replayed tree {tree} != {}",
            run.label,
            run.report.final_tree
        );
        ensure!(
            commit == run.report.final_commit,
            "{}: replayed commit differs",
            run.label
        );
        ensure!(
            repo.live_worktrees().is_empty(),
            "{}: replay left a worktree",
            run.label
        );
    }
    let zero = gate
        .runs
        .iter()
        .find(|r| r.report.promotions == 0)
        .ok_or("no zero-promotion run")?;
    ensure!(
        zero.report.final_tree == zero.report.initial_tree,
        "zero-promotion run moved the tree"
    );

    let sub = gate
        .runs
        .iter()
        .find(|r| r.label == "subagent")
        .ok_or("no subagent run")?;
    let mut broken = sub.report.clone();
    let removed = broken.accepted_patch_chain.remove(0);
    let repo = RepoHandle::open(
        &sub.fixture.repo,
        "main",
        Some(sub.fixture.dir.path().join("replay")),
    )
    .map_err(|e| e.to_string())?;
    match replay(&broken, &repo) {
        Err(ReplayError::Divergence { round: Some(r), .. }) => {
            let next = broken.accepted_patch_chain.first().map(|c| c.round);
            ensure!(
                Some(r) == next && r > removed.round,
                "diverged at round {r}"
            );
        }
        other => return Err(format!("deleted entry not detected: {other:?}")),
    }
    Ok(())
}

fn determinism(gate: &mut Gate) -> Outcome {
    type Build = fn(&Fixture) -> RunConfig;
    let cases: [(&str, String, Build); 3] = [
        ("single", single_script(), single_cfg),
        (
            "subagent",
            subagent_script(&subagent_rounds()),
            subagent_cfg,
        ),
        ("team", team_script(), team_cfg),
    ];
    for (label, script, build) in cases {
        let mut logs = Vec::new();
        for _ in 0..2 {
            let fx = Fixture::new(0.0, &script);
            let (report, backend) =
                run_scripted(build(&fx)).map_err(|e| format!("{label}: {e}"))?;
            let text = std::fs::read_to_string(run_dir(&report).join(EVENTS_FILE))
                .map_err(|e| e.to_string())?;
            logs.push(normalize_log(&text).map_err(|e| e.to_string())?);
            if label == "single" {
                gate.runs.push(Completed {
                    label: "single",
                    report,
                    fixture: fx,
                    calls: backend.calls().len(),
                });
            }
        }
        ensure!(logs[0] == logs[1], "{label}: normalized event logs differ");
        ensure!(!logs[0].is_empty(), "{label}: empty log");
    }
    Ok(())
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("acceptance rule", acceptance_rule),
        ("patch contract", patch_contract),
        ("worktree isolation", isolation),
        ("subagent trace equivalence", subagent_trace_equivalence),
        ("agent-team trace equivalence", team_trace_equivalence),
        ("lifecycle taxonomy", lifecycle_taxonomy),
        ("budget compliance", budget_compliance),
        ("determinism", determinism),
        ("replay fidelity", replay_fidelity),
    ];
    let mut gate = Gate::default();
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut gate))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        match outcome {
            Ok(()) => println!("PASS  {name} ({:.2}s)", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({:.2}s): {why}", took.as_secs_f64());
            }
        }
    }
    println!("{} of {} acceptance criteria passed", 9 - failed, 9);
    if failed > 0 {
        std::process::exit(1);
    }
}

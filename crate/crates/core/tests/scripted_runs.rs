//! Whole runs against the fixture projects with scripted replies.

mod common;

use std::collections::BTreeSet;

use common::{config_for, run, task};
use use_engine::actions::{contract, ActionName};
use use_engine::bench::evaluate;
use use_engine::meta::{Mode, RunConfig, RunResult, TerminalKind, Workflow};

fn with_workflow(mut config: RunConfig, name: &str) -> RunConfig {
    config.mode = Mode::Static {
        workflow: Workflow::named(name).unwrap(),
    };
    config
}

/// (task, script, static workflow)
const MATRIX: &[(&str, &str, Option<&str>)] = &[
    ("calc-divide", "calc-divide-dynamic.toml", None),
    ("calc-divide", "calc-divide-static-swe.toml", Some("swe")),
    ("calc-divide", "calc-divide-review-revise.toml", None),
    ("calc-divide-partial", "calc-divide-static-swe.toml", Some("swetry")),
    ("calc-divide-regression", "calc-divide-regression-dynamic.toml", None),
    ("calc-clamp-tests", "calc-clamp-tests-static.toml", Some("repotest")),
    ("calc-mean", "calc-mean-static.toml", Some("repocod")),
    ("inventory-total-value", "inventory-total-value-dynamic.toml", None),
];

fn matrix_run(task_id: &str, script: &str, workflow: Option<&str>) -> RunResult {
    let t = task(task_id);
    let mut config = config_for(&t);
    if let Some(w) = workflow {
        config = with_workflow(config, w);
    }
    run(&t, script, &config)
}

#[test]
fn every_matrix_run_resolves_and_respects_write_sets() {
    let mut seen = BTreeSet::new();
    let mut violations = Vec::new();
    for (task_id, script, workflow) in MATRIX {
        let result = matrix_run(task_id, script, *workflow);
        assert_eq!(result.terminal().kind, TerminalKind::Finish, "{task_id}/{script}");
        for step in &result.trajectory.steps {
            seen.insert(step.action);
            let allowed = contract(step.action).writes;
            for field in &step.delta.fields {
                if !allowed.contains(field) {
                    violations.push(format!("{task_id}/{script} round {}: {} wrote {field}", step.round, step.action));
                }
            }
        }
        let verdict = evaluate(&task(task_id), &result.solution.diff).unwrap();
        assert!(verdict.resolved, "{task_id}/{script}: {}", verdict.detail);
    }
    assert!(violations.is_empty(), "{violations:#?}");
    assert_eq!(seen, ActionName::ALL.into_iter().collect());
}

#[test]
fn dynamic_run_reaches_the_expected_sequence() {
    let result = matrix_run("calc-divide", "calc-divide-dynamic.toml", None);
    use ActionName::*;
    assert_eq!(result.trajectory.actions(), vec![Reproduction, CodeRetrieval, EditCode, ReviewPatch, Terminate]);
    assert_eq!(result.solution.chosen.as_ref().unwrap().as_str(), "d2");
    assert_eq!(result.state.reproducer.as_ref().unwrap().as_str(), "d1");
}

#[test]
fn static_swe_run_follows_the_workflow() {
    let result = matrix_run("calc-divide", "calc-divide-static-swe.toml", Some("swe"));
    assert_eq!(result.trajectory.header.mode, "static:swe");
    let wf = Workflow::named("swe").unwrap();
    let actions = result.trajectory.actions();
    for (i, a) in actions[..actions.len() - 1].iter().enumerate() {
        assert_eq!(*a, wf.action_at(i));
    }
    assert_eq!(actions.last(), Some(&ActionName::Terminate));
}

#[test]
fn never_terminating_script_hits_the_round_limit() {
    let t = task("calc-divide");
    let result = run(&t, "never-terminate.toml", &config_for(&t));
    assert_eq!(result.trajectory.steps.len(), 20);
    let term = result.terminal();
    assert_eq!(term.kind, TerminalKind::ForcedSelection);
    assert_eq!(term.rounds, 20);
    assert!(result.trajectory.steps.iter().all(|s| s.error.is_some()));
    assert!(result.solution.is_empty());
}

#[test]
fn round_limit_is_configurable() {
    let t = task("calc-divide");
    let config = RunConfig {
        max_rounds: 5,
        ..config_for(&t)
    };
    let result = run(&t, "never-terminate.toml", &config);
    assert_eq!(result.trajectory.steps.len(), 5);
    assert_eq!(result.terminal().kind, TerminalKind::ForcedSelection);
}

#[test]
fn disabled_action_never_runs() {
    let t = task("calc-divide");
    let config = config_for(&t).disable(ActionName::ExecuteTests);
    let result = run(&t, "calc-divide-ablation.toml", &config);
    assert_eq!(result.terminal().kind, TerminalKind::Finish);
    assert!(!result.trajectory.header.enabled.contains(&ActionName::ExecuteTests));
    assert!(result.trajectory.steps.iter().all(|s| s.action != ActionName::ExecuteTests));
    assert!(evaluate(&t, &result.solution.diff).unwrap().resolved);
}

#[test]
fn scripted_runs_are_reproducible() {
    let a = matrix_run("calc-divide", "calc-divide-review-revise.toml", None);
    let b = matrix_run("calc-divide", "calc-divide-review-revise.toml", None);
    assert_eq!(a.trajectory.to_jsonl(), b.trajectory.to_jsonl());
    assert_eq!(a.solution, b.solution);
    assert_eq!(a.ledger, b.ledger);
}

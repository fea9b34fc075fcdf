//! Solving criteria against hand-counted expectations on the fixtures.

mod common;

use common::{read_fixture, task};
use use_engine::bench::{evaluate, load_dir, make_partial_fix_task, self_check, Metric, TaskType};

#[test]
fn every_fixture_task_passes_its_self_check() {
    let tasks = load_dir(&common::fixtures().join("tasks")).unwrap();
    assert_eq!(tasks.len(), 12);
    assert_eq!(use_engine::bench::task_types(&tasks).len(), TaskType::ALL.len());
    for t in &tasks {
        let check = self_check(t).unwrap();
        assert!(check.gold.is_some(), "{}", t.id);
        assert!(check.ok(), "{}: {check:?}", t.id);
    }
}

fn coverage(task_id: &str, variant: &str) -> (usize, usize, bool) {
    let v = evaluate(&task(task_id), &read_fixture(variant)).unwrap();
    match v.metric {
        Metric::PatchCoverage { covered, total, .. } | Metric::MethodCoverage { covered, total, .. } => {
            (covered, total, v.resolved)
        }
        other => panic!("unexpected metric {other:?}"),
    }
}

#[test]
fn gold_patch_coverage_fractions() {
    assert_eq!(coverage("textkit-truncate-regression", "gold/textkit-truncate-regression.tests.diff"), (10, 10, true));
    // no negative-width test: the raise line is never reached
    assert_eq!(coverage("textkit-truncate-regression", "variants/textkit-truncate-regression-partial.diff"), (9, 10, false));
    assert_eq!(coverage("calc-divide-regression", "gold/calc-divide-regression.tests.diff"), (1, 1, true));
}

#[test]
fn strict_mode_rejects_tests_that_pass_before_the_fix() {
    let v = evaluate(&task("calc-divide-regression"), &read_fixture("variants/calc-divide-regression-passing.diff")).unwrap();
    assert!(!v.resolved);
    assert!(v.detail.contains("strict"), "{}", v.detail);
}

#[test]
fn method_coverage_fractions() {
    assert_eq!(coverage("calc-clamp-tests", "gold/calc-clamp-tests.diff"), (5, 5, true));
    assert_eq!(coverage("calc-clamp-tests", "variants/calc-clamp-tests-partial.diff"), (3, 5, false));
    assert_eq!(coverage("inventory-remove-tests", "gold/inventory-remove-tests.diff"), (8, 8, true));
    assert_eq!(coverage("inventory-remove-tests", "variants/inventory-remove-tests-partial.diff"), (5, 8, false));
}

#[test]
fn near_miss_repair_is_unresolved() {
    let v = evaluate(&task("calc-divide"), &read_fixture("variants/calc-divide-near-miss.diff")).unwrap();
    assert!(!v.resolved);
    assert_eq!(v.metric, Metric::TestSuite { passed: 4, total: 5 });
}

#[test]
fn feature_needs_its_own_tests() {
    let t = task("inventory-total-value");
    let v = evaluate(&t, &read_fixture("variants/inventory-total-value-untested.diff")).unwrap();
    assert!(!v.resolved);
    match v.metric {
        Metric::Feature { passed, total, fraction, .. } => {
            assert_eq!((passed, total), (2, 2));
            assert_eq!(fraction, 0.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_solution_is_an_error() {
    assert!(evaluate(&task("calc-divide"), "--- a/x\n+++ b/x\n@@ -1,2 +1,2 @@\n-a\n").is_err());
}

#[test]
fn partial_fix_tasks_can_be_derived() {
    let base = task("calc-divide");
    let patch = read_fixture("variants/calc-divide-partial.diff");
    let derived = make_partial_fix_task(&base, &patch).unwrap();
    assert_eq!(derived.id, "calc-divide-partial");
    assert_eq!(derived.task_type, TaskType::PartialFix);
    assert!(derived.agent_description().contains("return float(a // b)"));
    assert!(!evaluate(&derived, &patch).unwrap().resolved);
    assert!(make_partial_fix_task(&task("calc-mean"), &patch).is_err());
    assert!(make_partial_fix_task(&base, &read_fixture("gold/textkit-slugify.diff")).is_err());
}

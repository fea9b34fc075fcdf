//! ExecuteTests: run test files or the reproducer against a diff selection.

use std::fmt::Write as _;

use super::results::{failure_summary, parse_test_output, TestSummary};
use super::{expand, ActionEnv, ActionError, ActionName, ActionOutput, Artifact};
use crate::diff;
use crate::state::{DiffId, ExecRecord, TaskState, REPRODUCER_SELECTOR};
use crate::workspace::CommandResult;

pub(super) const REPRODUCER_COMMAND: &str = "python3 reproduce_issue.py";

pub(super) struct Run {
    pub result: CommandResult,
    pub summary: TestSummary,
    pub text: String,
}

/// Runs `command` in the workspace as it currently stands.
pub(super) fn run_tests(env: &ActionEnv, command: &str) -> Result<Run, ActionError> {
    let result = env.ws.run_command(command, env.limits.test_timeout)?;
    let summary = parse_test_output(&result);
    let text = failure_summary(&summary, &result);
    Ok(Run { result, summary, text })
}

pub(super) fn record(state: &mut TaskState, diffs: &[DiffId], tests: Vec<String>, command: &str, run: &Run) -> Result<usize, ActionError> {
    state.record_execution(ExecRecord {
        diff_selection: diffs.to_vec(),
        test_selection: tests,
        command: command.to_string(),
        exit_status: run.result.exit_code,
        failure_summary: run.text.clone(),
        coverage: None,
        wall_time: run.result.duration,
    })?;
    Ok(state.exec_records.len())
}

fn describe(out: &mut String, label: &str, command: &str, diffs: &[DiffId], run: &Run) {
    let _ = write!(
        out,
        "{label}: `{command}` with diffs [{}] -> exit {}, {}",
        diffs.iter().map(DiffId::as_str).collect::<Vec<_>>().join(", "),
        run.result.exit_code,
        run.summary.headline()
    );
    if !run.summary.all_passed() {
        let _ = write!(out, "\n{}", run.text);
    }
    out.push('\n');
}

pub(super) fn execute_tests(
    env: &ActionEnv,
    state: &mut TaskState,
    tests: &[String],
    diffs: &[DiffId],
) -> Result<ActionOutput, ActionError> {
    let selected = expand(state, diffs)?;
    let mut want_reproducer = false;
    let mut files: Vec<String> = Vec::new();
    for t in tests.iter().map(|t| t.trim()).filter(|t| !t.is_empty()) {
        if t.eq_ignore_ascii_case(REPRODUCER_SELECTOR) {
            want_reproducer = true;
        } else {
            diff::validate_relative_path(t).map_err(|e| ActionError::InvalidArgument(format!("test `{t}`: {e}")))?;
            if !files.iter().any(|f| f == t) {
                files.push(t.to_string());
            }
        }
    }
    let run_files = !files.is_empty() || (!want_reproducer && files.is_empty());
    if files.is_empty() && !want_reproducer {
        for loc in &state.test_locations {
            if !files.contains(&loc.location.file) {
                files.push(loc.location.file.clone());
            }
        }
    }
    if want_reproducer && state.reproducer.is_none() {
        return Err(ActionError::InvalidArgument(
            "no reproducer has been stored; run Reproduction first".into(),
        ));
    }

    let mut narrative = String::new();
    let mut artifacts = Vec::new();
    let mut all_passed = true;

    if run_files {
        env.apply_selection(state, &selected)?;
        let command = env.test_command(ActionName::ExecuteTests.as_str(), &files).render(&files);
        let run = run_tests(env, &command)?;
        all_passed &= run.summary.all_passed();
        let label = if files.is_empty() { "whole test suite".to_string() } else { files.join(", ") };
        describe(&mut narrative, &label, &command, &selected, &run);
        let n = record(state, &selected, files.clone(), &command, &run)?;
        artifacts.push(Artifact::Record(n));
    }
    if want_reproducer {
        let reproducer = state.reproducer.clone().expect("checked above");
        let mut ids = selected.clone();
        ids.push(reproducer.clone());
        let ids = expand(state, &ids)?;
        env.apply_selection(state, &ids)?;
        let run = run_tests(env, REPRODUCER_COMMAND)?;
        all_passed &= run.summary.all_passed();
        let code_only: Vec<DiffId> = selected.iter().filter(|d| **d != reproducer).cloned().collect();
        describe(&mut narrative, &format!("reproducer {reproducer}"), REPRODUCER_COMMAND, &code_only, &run);
        let n = record(state, &code_only, vec![REPRODUCER_SELECTOR.to_string()], REPRODUCER_COMMAND, &run)?;
        artifacts.push(Artifact::Record(n));
    }
    env.ws.reset()?;
    Ok(ActionOutput {
        narrative: narrative.trim_end().to_string(),
        artifacts,
        success_hint: all_passed,
        ..Default::default()
    })
}

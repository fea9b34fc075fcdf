//! Reproduction: draft a standalone test that demonstrates the issue.

use std::sync::LazyLock;

use regex::Regex;

use super::execute::{record, run_tests, Run, REPRODUCER_COMMAND};
use super::{truncate, ActionEnv, ActionError, ActionName, ActionOutput, Artifact, REPRODUCER_PATH};
use crate::diff::{self, Patch};
use crate::llm::{ChatMessage, FieldSpec, FieldType, LlmError, Schema};
use crate::state::{BaselineSource, DiffDraft, DiffKind, TaskState, REPRODUCER_SELECTOR};

static EXCEPTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z_][\w.]*(?:Error|Exception|Exit|Interrupt)|AssertionError)\b").expect("valid"));

const HARNESS_ERRORS: &[&str] = &[
    "SyntaxError",
    "IndentationError",
    "TabError",
    "ImportError",
    "ModuleNotFoundError",
    "NameError",
];

/// Why a reproducer run says more about the script than about the issue.
pub(super) fn harness_crash(run: &Run) -> Option<String> {
    if run.result.timed_out {
        return Some("the script timed out".into());
    }
    if matches!(run.result.exit_code, 126 | 127) {
        return Some(format!("the script could not be executed (exit {})", run.result.exit_code));
    }
    let last_exception = run
        .result
        .stderr
        .lines()
        .rev()
        .find_map(|l| EXCEPTION_LINE.captures(l).map(|c| c[1].to_string()))?;
    let short = last_exception.rsplit('.').next().unwrap_or(&last_exception);
    HARNESS_ERRORS
        .contains(&short)
        .then(|| format!("the script itself is broken ({short})"))
}

pub(super) fn reproduction(env: &ActionEnv, state: &mut TaskState, instruction: &str) -> Result<ActionOutput, ActionError> {
    let schema = Schema::Object(vec![FieldSpec::required(
        "content",
        FieldType::String,
        "full source of the reproduction script",
    )]);
    let prompt = format!(
        "Write a standalone Python script that reproduces the issue below. It is saved as `{REPRODUCER_PATH}` at the \
         project root and run with `{REPRODUCER_COMMAND}` from there. It must exit with a non-zero status (for example \
         through a failing assert) while the issue is present and exit 0 once it is fixed. Do not modify project files.\n\n\
         Task:\n{}\n\nInstruction:\n{instruction}\n\n{}",
        env.task_description,
        schema.describe()
    );
    let baseline = env.ws.baseline_text(REPRODUCER_PATH);
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut last_problem = String::new();
    for attempt in 1..=env.limits.reproduction_attempts {
        let value = match env.gateway.select_structured(ActionName::Reproduction.as_str(), &messages, &schema) {
            Ok(v) => v,
            Err(LlmError::Decision(e)) => return Ok(ActionOutput::new(format!("no usable reproduction script: {e}"), false)),
            Err(e) => return Err(e.into()),
        };
        let mut content = value["content"].as_str().unwrap_or_default().to_string();
        if !content.ends_with('\n') {
            content.push('\n');
        }
        env.ws.reset()?;
        env.ws.write_file(REPRODUCER_PATH, &content)?;
        let run = run_tests(env, REPRODUCER_COMMAND)?;
        env.ws.reset()?;
        if let Some(problem) = harness_crash(&run) {
            last_problem = format!("attempt {attempt}: {problem}\n{}", run.text);
            messages.push(ChatMessage::assistant(crate::llm::fenced_json(&value)));
            messages.push(ChatMessage::user(format!(
                "Running the script failed for reasons unrelated to the issue: {problem}.\nOutput:\n{}\n\nFix the script.\n{}",
                run.text,
                schema.describe()
            )));
            continue;
        }
        let file_patch = diff::diff_file(REPRODUCER_PATH, baseline.as_deref(), Some(&content))
            .ok_or_else(|| ActionError::InvalidArgument("reproduction script is identical to the existing file".into()))?;
        let text = Patch { files: vec![file_patch] }.render();
        let reproduces = run.result.exit_code != 0;
        let id = state.add_diff(DiffDraft {
            kind: DiffKind::Test,
            text,
            origin: ActionName::Reproduction.to_string(),
            parents: Vec::new(),
            summary: format!(
                "standalone reproduction test ({} on the unmodified program)",
                if reproduces { "fails" } else { "passes" }
            ),
        })?;
        state.set_reproducer(&id)?;
        let n = record(state, &[], vec![REPRODUCER_SELECTOR.to_string()], REPRODUCER_COMMAND, &run)?;
        let narrative = if reproduces {
            format!(
                "Stored reproducer {id}; on the unmodified program it fails as expected (exit {}):\n{}",
                run.result.exit_code,
                truncate(&run.text, 2000)
            )
        } else {
            format!("Stored reproducer {id}, but it PASSES on the unmodified program: the issue was not reproduced.")
        };
        return Ok(ActionOutput {
            narrative,
            artifacts: vec![Artifact::Diff(id), Artifact::Record(n)],
            success_hint: reproduces,
            ..Default::default()
        });
    }
    Ok(ActionOutput::new(
        format!(
            "Every reproduction draft crashed the script itself ({} attempts). Last:\n{last_problem}",
            env.limits.reproduction_attempts
        ),
        false,
    ))
}

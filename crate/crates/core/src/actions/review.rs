//! ReviewPatch: judge a code diff against the reproducer and refine it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::edit::perform_edit;
use super::execute::{run_tests, Run, REPRODUCER_COMMAND};
use super::{expand, truncate, ActionEnv, ActionError, ActionName, ActionOutput, Artifact, REPRODUCER_PATH};
use crate::llm::{ChatMessage, FieldSpec, FieldType, LlmError, Schema};
use crate::state::{DiffDraft, DiffId, DiffKind, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Approve,
    RevisePatch,
    ReviseTest,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Approve => "approve",
            Verdict::RevisePatch => "revise-patch",
            Verdict::ReviseTest => "revise-test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Verdict::Approve, Verdict::RevisePatch, Verdict::ReviseTest]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

fn outcome(run: &Run) -> String {
    format!(
        "exit {} ({})\n{}",
        run.result.exit_code,
        if run.result.exit_code == 0 { "passes" } else { "fails" },
        truncate(&run.text, 1500)
    )
}

fn verdict_schema() -> Schema {
    Schema::Object(vec![
        FieldSpec::required(
            "verdict",
            FieldType::Enum(vec!["approve".into(), "revise-patch".into(), "revise-test".into()]),
            "approve the patch, or say which side needs revision",
        ),
        FieldSpec::optional("feedback", FieldType::String, "what is wrong"),
        FieldSpec::optional("location", FieldType::String, "where to revise (`file::Name`, `file:a-b` or `file`)"),
        FieldSpec::optional("instruction", FieldType::String, "the change to make when revising"),
    ])
}

pub(super) fn review_patch(
    env: &ActionEnv,
    state: &mut TaskState,
    code_diff: &DiffId,
    reproducer: Option<&DiffId>,
) -> Result<ActionOutput, ActionError> {
    if state.diff(code_diff).is_none() {
        return Err(ActionError::InvalidArgument(format!("unknown diff `{code_diff}`")));
    }
    let test = reproducer
        .cloned()
        .or_else(|| state.reproducer.clone())
        .ok_or_else(|| ActionError::InvalidArgument("no reproducer to review against; run Reproduction first".into()))?;
    match state.diff(&test) {
        None => return Err(ActionError::InvalidArgument(format!("unknown diff `{test}`"))),
        Some(d) if d.kind != DiffKind::Test => {
            return Err(ActionError::InvalidArgument(format!("`{test}` is not a test diff")))
        }
        Some(_) => {}
    }

    let schema = verdict_schema();
    let mut current_code = code_diff.clone();
    let mut current_test = test;
    let mut artifacts = Vec::new();
    let mut log = String::new();
    let mut last_verdict = None;

    for round in 1..=env.limits.review_rounds {
        let test_chain = expand(state, std::slice::from_ref(&current_test))?;
        env.apply_selection(state, &test_chain)?;
        let pristine = run_tests(env, REPRODUCER_COMMAND)?;
        let both = expand(state, &[current_code.clone(), current_test.clone()])?;
        env.apply_selection(state, &both)?;
        let patched = run_tests(env, REPRODUCER_COMMAND)?;
        env.ws.reset()?;
        let patched_passes = patched.result.exit_code == 0 && !patched.result.timed_out;

        let code_text = state.diff(&current_code).map(|d| d.text.clone()).unwrap_or_default();
        let test_text = state.diff(&current_test).map(|d| d.text.clone()).unwrap_or_default();
        let prompt = format!(
            "Review a candidate patch for the task below using its reproduction test.\n\nTask:\n{}\n\n\
             Patch {current_code}:\n{}\n\nReproduction test {current_test}:\n{}\n\n\
             Reproduction test on the unmodified program: {}\n\nReproduction test with the patch: {}\n\n\
             Approve only if the patch fixes the issue. Choose revise-test if the test does not capture the issue.\n{}",
            env.task_description,
            truncate(&code_text, 4000),
            truncate(&test_text, 3000),
            outcome(&pristine),
            outcome(&patched),
            schema.describe()
        );
        let value = match env
            .gateway
            .select_structured(ActionName::ReviewPatch.as_str(), &[ChatMessage::user(prompt)], &schema)
        {
            Ok(v) => v,
            Err(LlmError::Decision(e)) => {
                let _ = writeln!(log, "round {round}: no usable verdict ({e})");
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let mut verdict = Verdict::parse(value["verdict"].as_str().unwrap_or_default()).unwrap_or(Verdict::RevisePatch);
        let feedback = value["feedback"].as_str().unwrap_or_default().to_string();
        if verdict == Verdict::Approve && !patched_passes {
            let _ = writeln!(
                log,
                "round {round}: approval of {current_code} overruled, the reproducer still fails with it"
            );
            verdict = Verdict::RevisePatch;
        }
        last_verdict = Some(verdict);
        let _ = writeln!(
            log,
            "round {round}: {} for {current_code} against {current_test} (pristine exit {}, patched exit {}){}",
            verdict.as_str(),
            pristine.result.exit_code,
            patched.result.exit_code,
            if feedback.is_empty() { String::new() } else { format!(": {}", truncate(&feedback, 300)) }
        );
        if verdict == Verdict::Approve {
            return Ok(ActionOutput {
                narrative: format!("Approved {current_code}.\n{}", log.trim_end()),
                artifacts,
                success_hint: true,
                verdict: Some(Verdict::Approve),
                final_solution: None,
            });
        }
        if round == env.limits.review_rounds {
            break;
        }

        let (target, default_location, kind_default) = match verdict {
            Verdict::ReviseTest => (current_test.clone(), REPRODUCER_PATH.to_string(), DiffKind::Test),
            _ => {
                let first_file = crate::diff::Patch::parse(&code_text)
                    .ok()
                    .and_then(|p| p.touched_paths().into_iter().next())
                    .unwrap_or_default();
                (current_code.clone(), first_file, DiffKind::Code)
            }
        };
        let location = value["location"]
            .as_str()
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .unwrap_or(default_location);
        let instruction = value["instruction"]
            .as_str()
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| {
                if feedback.is_empty() {
                    "Make the reproduction test pass with the patch while still failing without it.".to_string()
                } else {
                    feedback.clone()
                }
            });
        let base = expand(state, std::slice::from_ref(&target))?;
        let context = format!(
            "Reproduction test on the unmodified program: {}\nReproduction test with the patch: {}",
            outcome(&pristine),
            outcome(&patched)
        );
        let edit = match perform_edit(env, ActionName::ReviewPatch, state, &base, &location, &instruction, &context) {
            Ok(r) => r,
            Err(ActionError::InvalidArgument(msg)) => Err(msg),
            Err(e) => return Err(e),
        };
        env.ws.reset()?;
        match edit {
            Ok(result) => {
                let kind = if kind_default == DiffKind::Test { DiffKind::Test } else { result.kind() };
                let id = state.add_diff(DiffDraft {
                    kind,
                    text: result.patch.render(),
                    origin: ActionName::ReviewPatch.to_string(),
                    parents: vec![target.clone()],
                    summary: format!("{} of {target}: {}", verdict.as_str(), truncate(&instruction, 100)),
                })?;
                let _ = writeln!(log, "  stored {id} revising {target}");
                artifacts.push(Artifact::Diff(id.clone()));
                match verdict {
                    Verdict::ReviseTest => current_test = id,
                    _ => current_code = id,
                }
            }
            Err(msg) => {
                let _ = writeln!(log, "  revision failed: {}", truncate(&msg, 500));
            }
        }
    }
    Ok(ActionOutput {
        narrative: format!(
            "Not approved after {} review rounds; latest code diff {current_code}, latest test {current_test}.\n{}",
            env.limits.review_rounds,
            log.trim_end()
        ),
        artifacts,
        success_hint: false,
        verdict: last_verdict,
        final_solution: None,
    })
}

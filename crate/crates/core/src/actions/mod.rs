//! The seven actions available to the Meta-Agent.
//!
//! Each action takes intent-level arguments, may run its own LLM sub-agent
//! loop, and touches only the task-state fields in its contract. Dispatch
//! enforces the contract by diffing state snapshots, and restores the
//! workspace to its pristine baseline after every action.

mod edit;
mod execute;
mod reproduction;
mod results;
mod retrieval;
mod review;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::index::{CodeIndex, IndexError};
use crate::knowledge::{DocStore, Framework, TestCommand};
use crate::llm::{FieldSpec, FieldType, Gateway, LlmError, Schema, Variant};
use crate::state::{ComposeError, CompositeDiff, DiffId, StateError, StateField, TaskState};
use crate::workspace::{Workspace, WorkspaceError};

pub use edit::{parse_location_ref, LocationRef};
pub use results::{parse_test_output, scrub_durations, TestSummary};
pub use review::Verdict;

/// Reserved path of the standalone reproduction test.
pub const REPRODUCER_PATH: &str = "reproduce_issue.py";
/// Terminate argument selecting no solution.
pub const EMPTY_SOLUTION: &str = "empty";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionName {
    CodeRetrieval,
    TestRetrieval,
    Reproduction,
    ExecuteTests,
    EditCode,
    ReviewPatch,
    Terminate,
}

impl ActionName {
    pub const ALL: [ActionName; 7] = [
        ActionName::CodeRetrieval,
        ActionName::TestRetrieval,
        ActionName::Reproduction,
        ActionName::ExecuteTests,
        ActionName::EditCode,
        ActionName::ReviewPatch,
        ActionName::Terminate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionName::CodeRetrieval => "CodeRetrieval",
            ActionName::TestRetrieval => "TestRetrieval",
            ActionName::Reproduction => "Reproduction",
            ActionName::ExecuteTests => "ExecuteTests",
            ActionName::EditCode => "EditCode",
            ActionName::ReviewPatch => "ReviewPatch",
            ActionName::Terminate => "Terminate",
        }
    }
}

impl fmt::Display for ActionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionName::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown action `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionContract {
    pub name: ActionName,
    pub description: &'static str,
    pub inputs: Vec<FieldSpec>,
    pub reads: &'static [StateField],
    pub writes: &'static [StateField],
}

impl ActionContract {
    pub fn variant(&self) -> Variant {
        Variant {
            name: self.name.to_string(),
            description: self.description.to_string(),
            fields: self.inputs.clone(),
        }
    }
}

pub fn contract(name: ActionName) -> ActionContract {
    use StateField::*;
    let instruction = || FieldSpec::required("instruction", FieldType::String, "what to look for or achieve");
    match name {
        ActionName::CodeRetrieval => ActionContract {
            name,
            description: "Search the codebase for program code relevant to an instruction and add it to the code locations.",
            inputs: vec![instruction()],
            reads: &[],
            writes: &[CodeLocations],
        },
        ActionName::TestRetrieval => ActionContract {
            name,
            description: "Search the existing test files for tests relevant to an instruction and add them to the test locations.",
            inputs: vec![instruction()],
            reads: &[CodeLocations],
            writes: &[TestLocations],
        },
        ActionName::Reproduction => ActionContract {
            name,
            description: "Write a standalone test that reproduces the reported issue, run it on the unmodified program, and store it as the reproducer.",
            inputs: vec![instruction()],
            reads: &[],
            writes: &[DiffStore, Reproducer, ExecRecords],
        },
        ActionName::ExecuteTests => ActionContract {
            name,
            description: "Run test files (or \"reproducer\") on the program with the selected diffs applied and record the results.",
            inputs: vec![
                FieldSpec::optional(
                    "tests",
                    FieldType::StringList,
                    "test file paths and/or \"reproducer\"; empty runs the collected test locations",
                ),
                FieldSpec::optional("diffs", FieldType::StringList, "ids of diffs to apply; parents are included"),
            ],
            reads: &[TestLocations, DiffStore, Reproducer],
            writes: &[ExecRecords],
        },
        ActionName::EditCode => ActionContract {
            name,
            description: "Modify code at a location to achieve a behavior change, on top of optional base diffs; stores the new diff.",
            inputs: vec![
                FieldSpec::required("delta_behavior", FieldType::String, "the behavior change to implement"),
                FieldSpec::required(
                    "location",
                    FieldType::String,
                    "`file::QualifiedName`, `file:start-end`, or `file`",
                ),
                FieldSpec::optional("base_diffs", FieldType::StringList, "diff ids to build on"),
            ],
            reads: &[CodeLocations, TestLocations, DiffStore],
            writes: &[DiffStore],
        },
        ActionName::ReviewPatch => ActionContract {
            name,
            description: "Check a code diff against the reproduction test and iteratively improve the patch or the test.",
            inputs: vec![
                FieldSpec::required("code_diff", FieldType::String, "id of the code diff to review"),
                FieldSpec::optional("reproducer", FieldType::String, "id of the test diff; defaults to the stored reproducer"),
            ],
            reads: &[DiffStore, Reproducer],
            writes: &[DiffStore],
        },
        ActionName::Terminate => ActionContract {
            name,
            description: "Finish and select the final solution: a diff id (its parents are included) or \"empty\".",
            inputs: vec![FieldSpec::required("chosen", FieldType::String, "diff id or \"empty\"")],
            reads: &[DiffStore],
            writes: &[],
        },
    }
}

/// Schema for choosing among `actions`.
pub fn invocation_schema(actions: &[ActionName]) -> Schema {
    Schema::Tagged {
        tag: "action".into(),
        variants: actions.iter().map(|a| contract(*a).variant()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", deny_unknown_fields)]
pub enum ActionInvocation {
    CodeRetrieval {
        instruction: String,
    },
    TestRetrieval {
        instruction: String,
    },
    Reproduction {
        instruction: String,
    },
    ExecuteTests {
        #[serde(default)]
        tests: Vec<String>,
        #[serde(default)]
        diffs: Vec<DiffId>,
    },
    EditCode {
        delta_behavior: String,
        location: String,
        #[serde(default)]
        base_diffs: Vec<DiffId>,
    },
    ReviewPatch {
        code_diff: DiffId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reproducer: Option<DiffId>,
    },
    Terminate {
        chosen: String,
    },
}

impl ActionInvocation {
    pub fn name(&self) -> ActionName {
        match self {
            ActionInvocation::CodeRetrieval { .. } => ActionName::CodeRetrieval,
            ActionInvocation::TestRetrieval { .. } => ActionName::TestRetrieval,
            ActionInvocation::Reproduction { .. } => ActionName::Reproduction,
            ActionInvocation::ExecuteTests { .. } => ActionName::ExecuteTests,
            ActionInvocation::EditCode { .. } => ActionName::EditCode,
            ActionInvocation::ReviewPatch { .. } => ActionName::ReviewPatch,
            ActionInvocation::Terminate { .. } => ActionName::Terminate,
        }
    }

    pub fn from_value(value: Value) -> Result<Self, String> {
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("invocation serializes")
    }
}

/// Something an action created: a stored diff or an execution record
/// (1-based index, rendered `r<n>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Artifact {
    Diff(DiffId),
    Record(usize),
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Artifact::Diff(id) => write!(f, "{id}"),
            Artifact::Record(n) => write!(f, "r{n}"),
        }
    }
}

impl Serialize for Artifact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Artifact {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.strip_prefix('r').and_then(|n| n.parse().ok()) {
            Some(n) => Ok(Artifact::Record(n)),
            None => Ok(Artifact::Diff(DiffId(s))),
        }
    }
}

/// The run's answer: a diff and its parent chain composed against the
/// baseline, or nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalSolution {
    pub chosen: Option<DiffId>,
    pub ids: Vec<DiffId>,
    pub diff: String,
}

impl FinalSolution {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.diff.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutput {
    pub narrative: String,
    pub artifacts: Vec<Artifact>,
    pub success_hint: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_solution: Option<FinalSolution>,
}

impl ActionOutput {
    pub fn new(narrative: impl Into<String>, success_hint: bool) -> Self {
        Self {
            narrative: narrative.into(),
            success_hint,
            ..Default::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ActionError {
    /// Bad arguments; reported back to the Meta-Agent, not fatal.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{action} is disabled")]
    Disabled { action: ActionName },
    #[error("{action} modified {fields:?} outside its write set")]
    ContractViolation { action: ActionName, fields: Vec<StateField> },
    #[error("workspace not restored to baseline after {0}")]
    NotNeutral(ActionName),
    #[error("artifact `{0}` does not resolve in the task state")]
    DanglingArtifact(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    State(#[from] StateError),
}

impl ActionError {
    pub fn is_recoverable(&self) -> bool {
        matches!(self, ActionError::InvalidArgument(_) | ActionError::Disabled { .. })
    }
}

impl From<ComposeError> for ActionError {
    fn from(e: ComposeError) -> Self {
        ActionError::InvalidArgument(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub retrieval_rounds: usize,
    pub edit_attempts: usize,
    pub review_rounds: usize,
    pub reproduction_attempts: usize,
    /// Per test-command timeout; the workspace default when `None`.
    pub test_timeout: Option<Duration>,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            retrieval_rounds: 15,
            edit_attempts: 5,
            review_rounds: 3,
            reproduction_attempts: 3,
            test_timeout: None,
        }
    }
}

/// Everything actions need for one task run.
pub struct ActionEnv {
    pub task_description: String,
    pub ws: Workspace,
    pub index: CodeIndex,
    pub docs: DocStore,
    pub gateway: Gateway,
    pub limits: ActionLimits,
    pub framework: Framework,
    test_command: OnceLock<TestCommand>,
}

impl fmt::Debug for ActionEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActionEnv").field("ws", &self.ws).finish()
    }
}

impl ActionEnv {
    /// Builds the code index and documentation store from the workspace.
    pub fn new(
        task_description: impl Into<String>,
        ws: Workspace,
        doc_globs: &[String],
        gateway: Gateway,
    ) -> Result<Self, ActionError> {
        let index = CodeIndex::build(&ws)?;
        let docs = DocStore::ingest(&ws, doc_globs).map_err(|e| ActionError::InvalidArgument(e.to_string()))?;
        let framework = Framework::detect(
            index.files().filter(|f| f.is_test).filter_map(|f| f.framework_hint.as_deref()),
            index.file("Cargo.toml").is_some(),
        );
        Ok(Self {
            task_description: task_description.into(),
            ws,
            index,
            docs,
            gateway,
            limits: ActionLimits::default(),
            framework,
            test_command: OnceLock::new(),
        })
    }

    pub fn with_limits(mut self, limits: ActionLimits) -> Self {
        self.limits = limits;
        self
    }

    /// Pins the test command instead of inferring it.
    pub fn with_test_command(self, command: TestCommand) -> Self {
        let _ = self.test_command.set(command);
        self
    }

    pub fn cached_test_command(&self) -> Option<&TestCommand> {
        self.test_command.get()
    }

    /// Runs one action. On success the state delta is confined to the
    /// action's write set and the workspace is back at baseline; on error
    /// the state is left untouched.
    pub fn dispatch(&self, state: &mut TaskState, invocation: &ActionInvocation) -> Result<ActionOutput, ActionError> {
        let action = invocation.name();
        let mut working = state.clone();
        let result = self.run(&mut working, invocation);
        self.ws.reset()?;
        if !self.ws.is_pristine()? {
            return Err(ActionError::NotNeutral(action));
        }
        let output = result?;
        let allowed: BTreeSet<StateField> = contract(action).writes.iter().copied().collect();
        let violations: Vec<StateField> = working.touched_fields(state).difference(&allowed).copied().collect();
        if !violations.is_empty() {
            return Err(ActionError::ContractViolation {
                action,
                fields: violations,
            });
        }
        for artifact in &output.artifacts {
            let ok = match artifact {
                Artifact::Diff(id) => working.diff(id).is_some(),
                Artifact::Record(n) => *n >= 1 && *n <= working.exec_records.len(),
            };
            if !ok {
                return Err(ActionError::DanglingArtifact(artifact.to_string()));
            }
        }
        *state = working;
        Ok(output)
    }

    fn run(&self, state: &mut TaskState, invocation: &ActionInvocation) -> Result<ActionOutput, ActionError> {
        match invocation {
            ActionInvocation::CodeRetrieval { instruction } => retrieval::code_retrieval(self, state, instruction),
            ActionInvocation::TestRetrieval { instruction } => retrieval::test_retrieval(self, state, instruction),
            ActionInvocation::Reproduction { instruction } => reproduction::reproduction(self, state, instruction),
            ActionInvocation::ExecuteTests { tests, diffs } => execute::execute_tests(self, state, tests, diffs),
            ActionInvocation::EditCode {
                delta_behavior,
                location,
                base_diffs,
            } => edit::edit_code(self, state, delta_behavior, location, base_diffs),
            ActionInvocation::ReviewPatch { code_diff, reproducer } => {
                review::review_patch(self, state, code_diff, reproducer.as_ref())
            }
            ActionInvocation::Terminate { chosen } => terminate(self, state, chosen).map(|solution| ActionOutput {
                narrative: match &solution.chosen {
                    Some(id) => format!(
                        "Selected {id} as the final solution (composed from [{}]).",
                        solution.ids.iter().map(DiffId::as_str).collect::<Vec<_>>().join(", ")
                    ),
                    None => "Selected the empty solution.".to_string(),
                },
                success_hint: !solution.is_empty(),
                final_solution: Some(solution),
                ..Default::default()
            }),
        }
    }

    fn test_command(&self, label: &str, target_files: &[String]) -> &TestCommand {
        self.test_command.get_or_init(|| {
            crate::knowledge::infer_test_command(
                &self.docs,
                &self.gateway,
                &crate::knowledge::CommandContext {
                    label,
                    task: &self.task_description,
                    target_files,
                    framework: self.framework,
                },
            )
        })
    }

    /// Resets, then applies the composition of `ids` (which must already
    /// include ancestors).
    fn apply_selection(&self, state: &TaskState, ids: &[DiffId]) -> Result<CompositeDiff, ActionError> {
        let composite = state.compose_diffs(ids, &self.ws)?;
        let report = self.ws.apply_diffs(&composite)?;
        if !report.applied() {
            return Err(ActionError::InvalidArgument(format!(
                "selected diffs do not apply: {}",
                report.failure_text()
            )));
        }
        Ok(composite)
    }
}

/// Composes the chosen diff with its parent chain. No state mutation.
pub fn terminate(env: &ActionEnv, state: &TaskState, chosen: &str) -> Result<FinalSolution, ActionError> {
    let chosen = chosen.trim();
    if chosen.eq_ignore_ascii_case(EMPTY_SOLUTION) {
        return Ok(FinalSolution::empty());
    }
    let id = DiffId(chosen.to_string());
    if state.diff(&id).is_none() {
        return Err(ActionError::InvalidArgument(format!(
            "unknown diff `{chosen}`; choose one of {:?} or \"{EMPTY_SOLUTION}\"",
            state.diff_store.keys().map(DiffId::as_str).collect::<Vec<_>>()
        )));
    }
    let ids = state.with_ancestors(std::slice::from_ref(&id))?;
    let composite = state.compose_diffs(&ids, &env.ws)?;
    Ok(FinalSolution {
        chosen: Some(id),
        ids,
        diff: composite.text(),
    })
}

/// Expands ids to include ancestors; unknown ids are argument errors.
fn expand(state: &TaskState, ids: &[DiffId]) -> Result<Vec<DiffId>, ActionError> {
    state.with_ancestors(ids).map_err(|e| ActionError::InvalidArgument(e.to_string()))
}

fn truncate(text: &str, max: usize) -> String {
    crate::state::truncate_chars(text, max)
}

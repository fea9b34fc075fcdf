//! The Meta-Agent: a ReAct-style loop that picks the next action from the
//! task description, the rendered task state and the last action's output,
//! plus a static-workflow mode that replaces the choice with a fixed
//! sequence.
//!
//! Every run yields a [`Trajectory`]: a header, one step record per round
//! and exactly one terminal record. Trajectories are line-delimited JSON and
//! carry no wall-clock data, so scripted runs reproduce byte for byte.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::actions::{
    contract, invocation_schema, terminate, ActionEnv, ActionError, ActionInvocation, ActionName, ActionOutput,
    Artifact, FinalSolution, Verdict, EMPTY_SOLUTION,
};
use crate::llm::{prompt_digest, ChatMessage, Exchange, FieldSpec, FieldType, LedgerSnapshot, LlmError, Schema, UsageTotals};
use crate::state::{DiffId, DiffKind, StateField, TaskState, DEFAULT_SUMMARY_BUDGET};

pub const DEFAULT_MAX_ROUNDS: usize = 20;
pub const META_AGENT_LABEL: &str = "MetaAgent";
pub const NO_PREVIOUS_ACTION: &str = "(no previous action: this is the first round)";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("max_rounds must be positive")]
    ZeroRounds,
    #[error("Terminate cannot be disabled in dynamic mode")]
    TerminateDisabled,
    #[error("no actions enabled")]
    NothingEnabled,
    #[error("workflow `{workflow}` uses disabled action {action}")]
    WorkflowUsesDisabled { workflow: String, action: ActionName },
    #[error("unknown workflow `{0}`; expected swe, swetry, swt, repocod or repotest")]
    UnknownWorkflow(String),
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trajectory has {0} terminal records; expected exactly one")]
    Terminals(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// When a static workflow leaves its trailing loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopBreak {
    /// ReviewPatch approved the patch.
    Approval,
    /// ExecuteTests reported every selected test passing.
    TestsPass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workflow {
    pub name: String,
    pub prefix: Vec<ActionName>,
    /// Repeated until the break predicate holds after its first action.
    pub repeat: Vec<ActionName>,
    pub break_on: LoopBreak,
}

impl Workflow {
    pub fn named(name: &str) -> Result<Self, ConfigError> {
        use ActionName::*;
        let (prefix, repeat, break_on) = match name.to_ascii_lowercase().as_str() {
            "swe" | "swetry" => (
                vec![Reproduction, CodeRetrieval, EditCode],
                vec![ReviewPatch, EditCode],
                LoopBreak::Approval,
            ),
            "swt" => (
                vec![TestRetrieval, CodeRetrieval, EditCode],
                vec![ExecuteTests, EditCode],
                LoopBreak::TestsPass,
            ),
            "repocod" => (
                vec![EditCode, TestRetrieval, EditCode],
                vec![ExecuteTests, EditCode],
                LoopBreak::TestsPass,
            ),
            "repotest" => (vec![TestRetrieval, EditCode], vec![ExecuteTests, EditCode], LoopBreak::TestsPass),
            _ => return Err(ConfigError::UnknownWorkflow(name.to_string())),
        };
        Ok(Self {
            name: name.to_ascii_lowercase(),
            prefix,
            repeat,
            break_on,
        })
    }

    /// Action for the 0-based position `i` in the unrolled sequence.
    pub fn action_at(&self, i: usize) -> ActionName {
        if i < self.prefix.len() {
            self.prefix[i]
        } else {
            self.repeat[(i - self.prefix.len()) % self.repeat.len()]
        }
    }

    fn is_loop_head(&self, i: usize) -> bool {
        i >= self.prefix.len() && (i - self.prefix.len()).is_multiple_of(self.repeat.len())
    }

    fn actions(&self) -> impl Iterator<Item = ActionName> + '_ {
        self.prefix.iter().chain(&self.repeat).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Mode {
    Dynamic,
    Static { workflow: Workflow },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_rounds: usize,
    pub mode: Mode,
    pub enabled: BTreeSet<ActionName>,
    /// Diff kind a final solution is drawn from when the round limit forces
    /// a choice.
    pub solution_kind: DiffKind,
    pub summary_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            mode: Mode::Dynamic,
            enabled: ActionName::ALL.into_iter().collect(),
            solution_kind: DiffKind::Code,
            summary_budget: DEFAULT_SUMMARY_BUDGET,
        }
    }
}

impl RunConfig {
    pub fn disable(mut self, action: ActionName) -> Self {
        self.enabled.remove(&action);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_rounds == 0 {
            return Err(ConfigError::ZeroRounds);
        }
        match &self.mode {
            Mode::Dynamic => {
                if !self.enabled.contains(&ActionName::Terminate) {
                    return Err(ConfigError::TerminateDisabled);
                }
                if self.enabled.len() < 2 {
                    return Err(ConfigError::NothingEnabled);
                }
            }
            Mode::Static { workflow } => {
                if let Some(action) = workflow.actions().find(|a| !self.enabled.contains(a)) {
                    return Err(ConfigError::WorkflowUsesDisabled {
                        workflow: workflow.name.clone(),
                        action,
                    });
                }
            }
        }
        Ok(())
    }

    fn enabled_list(&self) -> Vec<ActionName> {
        self.enabled.iter().copied().collect()
    }
}

/// Summary of what a step changed in the task state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDelta {
    pub fields: Vec<StateField>,
    pub new_diffs: Vec<DiffId>,
    pub new_records: usize,
    pub new_code_locations: usize,
    pub new_test_locations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducer: Option<DiffId>,
}

impl StateDelta {
    pub fn between(before: &TaskState, after: &TaskState) -> Self {
        Self {
            fields: after.touched_fields(before).into_iter().collect(),
            new_diffs: after
                .diff_store
                .keys()
                .filter(|k| !before.diff_store.contains_key(*k))
                .cloned()
                .collect(),
            new_records: after.exec_records.len().saturating_sub(before.exec_records.len()),
            new_code_locations: after.code_locations.len().saturating_sub(before.code_locations.len()),
            new_test_locations: after.test_locations.len().saturating_sub(before.test_locations.len()),
            reproducer: (after.reproducer != before.reproducer).then(|| after.reproducer.clone()).flatten(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

impl fmt::Display for StateDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("no state change");
        }
        let mut parts = Vec::new();
        if !self.new_diffs.is_empty() {
            parts.push(format!(
                "diffs +[{}]",
                self.new_diffs.iter().map(DiffId::as_str).collect::<Vec<_>>().join(", ")
            ));
        }
        if self.new_records > 0 {
            parts.push(format!("records +{}", self.new_records));
        }
        if self.new_code_locations > 0 {
            parts.push(format!("code locations +{}", self.new_code_locations));
        }
        if self.new_test_locations > 0 {
            parts.push(format!("test locations +{}", self.new_test_locations));
        }
        if let Some(r) = &self.reproducer {
            parts.push(format!("reproducer = {r}"));
        }
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub task_id: String,
    pub model: String,
    pub max_rounds: usize,
    pub mode: String,
    pub enabled: Vec<ActionName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub round: usize,
    pub prompt_digest: String,
    pub action: ActionName,
    pub arguments: Value,
    pub narrative: String,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
    pub success_hint: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    /// Set when the action rejected its arguments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub delta: StateDelta,
    pub usage: UsageTotals,
    #[serde(default)]
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    Finish,
    ForcedSelection,
    Error,
}

impl fmt::Display for TerminalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminalKind::Finish => "finish",
            TerminalKind::ForcedSelection => "forced-selection",
            TerminalKind::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub kind: TerminalKind,
    pub rounds: usize,
    pub chosen: Option<DiffId>,
    pub ids: Vec<DiffId>,
    /// Forced selection fell back to the deterministic rule.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub usage: UsageTotals,
    #[serde(default)]
    pub exchanges: Vec<Exchange>,
}

/// One line of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum Record {
    Header(TrajectoryHeader),
    Step(Box<Step>),
    Terminal(Terminal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub steps: Vec<Step>,
    pub terminal: Option<Terminal>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<ActionName> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut line = |r: &Record| -> std::io::Result<()> {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")
        };
        line(&Record::Header(self.header.clone()))?;
        for s in &self.steps {
            line(&Record::Step(Box::new(s.clone())))?;
        }
        if let Some(t) = &self.terminal {
            line(&Record::Terminal(t.clone()))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parses a trajectory file. A file holding only a header is valid and
    /// has no steps and no terminal record.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self, TrajectoryError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut terminals = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| TrajectoryError::Parse {
                line: n,
                message: e.to_string(),
            })?;
            match record {
                Record::Header(h) if header.is_none() && n == 1 => header = Some(h),
                Record::Header(_) => {
                    return Err(TrajectoryError::Parse {
                        line: n,
                        message: "header must be the first and only header line".into(),
                    })
                }
                Record::Step(_) | Record::Terminal(_) if header.is_none() => {
                    return Err(TrajectoryError::Parse {
                        line: n,
                        message: "missing header line".into(),
                    })
                }
                Record::Step(_) if !terminals.is_empty() => {
                    return Err(TrajectoryError::Parse {
                        line: n,
                        message: "step after terminal record".into(),
                    })
                }
                Record::Step(s) => steps.push(*s),
                Record::Terminal(t) => terminals.push(t),
            }
        }
        let header = header.ok_or(TrajectoryError::Parse {
            line: 1,
            message: "empty trajectory file".into(),
        })?;
        if terminals.len() > 1 {
            return Err(TrajectoryError::Terminals(terminals.len()));
        }
        Ok(Self {
            header,
            steps,
            terminal: terminals.pop(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub solution: FinalSolution,
    pub trajectory: Trajectory,
    pub ledger: LedgerSnapshot,
    pub state: TaskState,
}

impl RunResult {
    pub fn terminal(&self) -> &Terminal {
        self.trajectory.terminal.as_ref().expect("runs always end with a terminal record")
    }
}

fn usage_since(env: &ActionEnv, start: usize) -> UsageTotals {
    LedgerSnapshot::from_records(env.gateway.ledger().records().split_off(start)).totals
}

fn meta_prompt(env: &ActionEnv, config: &RunConfig, state: &TaskState, last: Option<&str>, round: usize, tail: &str) -> String {
    format!(
        "You are the Meta-Agent of a software engineering agent. You solve the task by invoking actions one at a time. \
         Each action updates the shared task state; you see the state and the previous action's output. Invoke \
         Terminate with the id of the diff that solves the task once you are done.\n\n\
         Task:\n{}\n\nTask state:\n{}\n\nOutput of the previous action:\n{}\n\nRound {round} of {}.\n\n{tail}",
        env.task_description,
        state.render_summary(config.summary_budget),
        last.unwrap_or(NO_PREVIOUS_ACTION),
        config.max_rounds,
    )
}

/// Asks the backend for the next action among the enabled ones.
pub fn select_next_action(
    env: &ActionEnv,
    config: &RunConfig,
    state: &TaskState,
    last_output: Option<&str>,
    round: usize,
) -> Result<(ActionInvocation, String), LlmError> {
    let schema = invocation_schema(&config.enabled_list());
    let prompt = meta_prompt(
        env,
        config,
        state,
        last_output,
        round,
        &format!("Choose the next action.\n{}", schema.describe()),
    );
    invoke(env, prompt, &schema)
}

/// Asks the backend to fill in the arguments of a fixed action.
pub fn fill_arguments(
    env: &ActionEnv,
    config: &RunConfig,
    state: &TaskState,
    last_output: Option<&str>,
    round: usize,
    action: ActionName,
) -> Result<(ActionInvocation, String), LlmError> {
    let schema = invocation_schema(&[action]);
    let prompt = meta_prompt(
        env,
        config,
        state,
        last_output,
        round,
        &format!("The next action is fixed: {action}. Provide its arguments.\n{}", schema.describe()),
    );
    invoke(env, prompt, &schema)
}

fn invoke(env: &ActionEnv, prompt: String, schema: &Schema) -> Result<(ActionInvocation, String), LlmError> {
    let messages = [ChatMessage::user(prompt)];
    let digest = prompt_digest(&messages);
    let value = env.gateway.select_structured(META_AGENT_LABEL, &messages, schema)?;
    let invocation = ActionInvocation::from_value(value.clone()).map_err(|e| {
        LlmError::Decision(crate::llm::DecisionError {
            violations: vec![e],
            raw: vec![value.to_string()],
        })
    })?;
    Ok((invocation, digest))
}

fn eligible(state: &TaskState, kind: DiffKind) -> Vec<DiffId> {
    let of_kind: Vec<DiffId> = state.diffs().filter(|d| d.kind == kind).map(|d| d.id.clone()).collect();
    if of_kind.is_empty() {
        state.diff_store.keys().cloned().collect()
    } else {
        of_kind
    }
}

/// Deterministic choice: the diff of `kind` with the most passing records
/// run on top of it, latest first on ties; "empty" when there is none.
pub fn fallback_selection(state: &TaskState, kind: DiffKind) -> Option<DiffId> {
    state
        .diffs()
        .filter(|d| d.kind == kind)
        .enumerate()
        .map(|(pos, d)| {
            let passing = state
                .exec_records
                .iter()
                .filter(|r| r.passed() && r.diff_selection.contains(&d.id))
                .count();
            (passing, pos, d.id.clone())
        })
        .max_by_key(|(passing, pos, _)| (*passing, *pos))
        .map(|(_, _, id)| id)
}

/// Picks a final diff after the round limit: the backend chooses among the
/// candidates, and any failure falls back to [`fallback_selection`]. Never
/// fails. Returns the choice and whether the fallback was used.
pub fn forced_selection(env: &ActionEnv, state: &TaskState, kind: DiffKind) -> (Option<DiffId>, bool) {
    let candidates = eligible(state, kind);
    if candidates.is_empty() {
        return (None, false);
    }
    let mut options: Vec<String> = candidates.iter().map(|d| d.to_string()).collect();
    options.push(EMPTY_SOLUTION.to_string());
    let schema = Schema::Object(vec![FieldSpec::required(
        "chosen",
        FieldType::Enum(options),
        "id of the diff to submit (its parents are included), or \"empty\"",
    )]);
    let mut listing = String::new();
    for id in &candidates {
        if let Some(d) = state.diff(id) {
            let parents = d.parents.iter().map(DiffId::as_str).collect::<Vec<_>>().join(", ");
            listing.push_str(&format!("- {} [{}] parents [{parents}]: {}\n", d.id, d.kind, d.summary));
        }
    }
    let mut records = String::new();
    for (i, r) in state.exec_records.iter().enumerate() {
        records.push_str(&format!(
            "- #{} diffs [{}] tests [{}]: exit {}\n",
            i + 1,
            r.diff_selection.iter().map(DiffId::as_str).collect::<Vec<_>>().join(", "),
            r.test_selection.join(", "),
            r.exit_status
        ));
    }
    if records.is_empty() {
        records.push_str("(none)\n");
    }
    let prompt = format!(
        "The round limit is reached. Select the final solution for the task below from the candidate diffs.\n\n\
         Task:\n{}\n\nCandidates:\n{listing}\nExecution records:\n{records}\n{}",
        env.task_description,
        schema.describe()
    );
    match env
        .gateway
        .select_structured(META_AGENT_LABEL, &[ChatMessage::user(prompt)], &schema)
    {
        Ok(v) => {
            let chosen = v["chosen"].as_str().unwrap_or(EMPTY_SOLUTION);
            if chosen == EMPTY_SOLUTION {
                (None, false)
            } else {
                (Some(DiffId(chosen.to_string())), false)
            }
        }
        Err(e) => {
            log::info!("forced selection falls back: {e}");
            (fallback_selection(state, kind), true)
        }
    }
}

struct Runner<'a> {
    env: &'a ActionEnv,
    config: &'a RunConfig,
    state: TaskState,
    steps: Vec<Step>,
    last_output: Option<String>,
}

enum StepOutcome {
    Continue(ActionOutput),
    Rejected,
    Finished(FinalSolution),
    Fatal(String),
}

impl<'a> Runner<'a> {
    fn step(&mut self, invocation: ActionInvocation, digest: String, ledger_start: usize) -> StepOutcome {
        let round = self.steps.len() + 1;
        let action = invocation.name();
        let before = self.state.clone();
        let result = if self.config.enabled.contains(&action) {
            self.env.dispatch(&mut self.state, &invocation)
        } else {
            Err(ActionError::Disabled { action })
        };
        let delta = StateDelta::between(&before, &self.state);
        let mut step = Step {
            round,
            prompt_digest: digest,
            action,
            arguments: invocation.to_value(),
            narrative: String::new(),
            artifacts: Vec::new(),
            success_hint: false,
            verdict: None,
            error: None,
            delta,
            usage: usage_since(self.env, ledger_start),
            exchanges: self.env.gateway.take_transcript(),
        };
        let outcome = match result {
            Ok(output) => {
                step.narrative = output.narrative.clone();
                step.artifacts = output.artifacts.clone();
                step.success_hint = output.success_hint;
                step.verdict = output.verdict;
                self.last_output = Some(format!("{action}: {}", output.narrative));
                match output.final_solution.clone() {
                    Some(solution) => StepOutcome::Finished(solution),
                    None => StepOutcome::Continue(output),
                }
            }
            Err(e) if e.is_recoverable() => {
                let msg = e.to_string();
                step.narrative = format!("{action} was not run: {msg}");
                step.error = Some(msg);
                self.last_output = Some(step.narrative.clone());
                StepOutcome::Rejected
            }
            Err(e) => {
                let msg = format!("{action} failed: {e}");
                step.narrative = msg.clone();
                step.error = Some(e.to_string());
                StepOutcome::Fatal(msg)
            }
        };
        self.steps.push(step);
        outcome
    }

    fn finish(self, kind: TerminalKind, solution: FinalSolution, fallback: bool, message: Option<String>, ledger_start: usize) -> RunResult {
        let terminal = Terminal {
            kind,
            rounds: self.steps.len(),
            chosen: solution.chosen.clone(),
            ids: solution.ids.clone(),
            fallback,
            message,
            usage: usage_since(self.env, ledger_start),
            exchanges: self.env.gateway.take_transcript(),
        };
        RunResult {
            solution,
            trajectory: Trajectory {
                header: header(self.env, self.config, ""),
                steps: self.steps,
                terminal: Some(terminal),
            },
            ledger: self.env.gateway.ledger().snapshot(),
            state: self.state,
        }
    }

    fn forced(self, ledger_start: usize) -> RunResult {
        let (chosen, fallback) = forced_selection(self.env, &self.state, self.config.solution_kind);
        let chosen_str = chosen.as_ref().map(DiffId::to_string).unwrap_or_else(|| EMPTY_SOLUTION.to_string());
        match terminate(self.env, &self.state, &chosen_str) {
            Ok(solution) => self.finish(TerminalKind::ForcedSelection, solution, fallback, None, ledger_start),
            Err(e) => {
                let msg = format!("forced selection of {chosen_str} does not compose: {e}");
                self.finish(TerminalKind::ForcedSelection, FinalSolution::empty(), true, Some(msg), ledger_start)
            }
        }
    }
}

fn header(env: &ActionEnv, config: &RunConfig, task_id: &str) -> TrajectoryHeader {
    TrajectoryHeader {
        task_id: task_id.to_string(),
        model: env.gateway.model().to_string(),
        max_rounds: config.max_rounds,
        mode: match &config.mode {
            Mode::Dynamic => "dynamic".to_string(),
            Mode::Static { workflow } => format!("static:{}", workflow.name),
        },
        enabled: config.enabled_list(),
    }
}

/// Runs one task to completion. Backend or workspace failures end the run
/// with an error terminal record rather than an `Err`.
pub fn run_task(env: &ActionEnv, task_id: &str, config: &RunConfig) -> Result<RunResult, ConfigError> {
    config.validate()?;
    env.gateway.take_transcript();
    let mut result = match &config.mode {
        Mode::Dynamic => run_dynamic(env, config),
        Mode::Static { workflow } => run_static(env, config, workflow),
    };
    result.trajectory.header.task_id = task_id.to_string();
    Ok(result)
}

/// Convenience wrapper running `workflow` in static mode.
pub fn run_static_workflow(env: &ActionEnv, task_id: &str, workflow: Workflow, config: &RunConfig) -> Result<RunResult, ConfigError> {
    let config = RunConfig {
        mode: Mode::Static { workflow },
        ..config.clone()
    };
    run_task(env, task_id, &config)
}

fn run_dynamic(env: &ActionEnv, config: &RunConfig) -> RunResult {
    let mut runner = Runner {
        env,
        config,
        state: TaskState::new(),
        steps: Vec::new(),
        last_output: None,
    };
    while runner.steps.len() < config.max_rounds {
        let round = runner.steps.len() + 1;
        let ledger_start = env.gateway.ledger().records().len();
        let (invocation, digest) =
            match select_next_action(env, config, &runner.state, runner.last_output.as_deref(), round) {
                Ok(x) => x,
                Err(e) => {
                    let msg = format!("Meta-Agent selection failed in round {round}: {e}");
                    return runner.finish(TerminalKind::Error, FinalSolution::empty(), false, Some(msg), ledger_start);
                }
            };
        match runner.step(invocation, digest, ledger_start) {
            StepOutcome::Continue(_) | StepOutcome::Rejected => {}
            StepOutcome::Finished(solution) => {
                let start = env.gateway.ledger().records().len();
                return runner.finish(TerminalKind::Finish, solution, false, None, start);
            }
            StepOutcome::Fatal(msg) => {
                let start = env.gateway.ledger().records().len();
                return runner.finish(TerminalKind::Error, FinalSolution::empty(), false, Some(msg), start);
            }
        }
    }
    let start = env.gateway.ledger().records().len();
    runner.forced(start)
}

fn loop_breaks(workflow: &Workflow, output: &ActionOutput, action: ActionName) -> bool {
    match workflow.break_on {
        LoopBreak::Approval => output.verdict == Some(Verdict::Approve),
        LoopBreak::TestsPass => action == ActionName::ExecuteTests && output.success_hint,
    }
}

fn run_static(env: &ActionEnv, config: &RunConfig, workflow: &Workflow) -> RunResult {
    let mut runner = Runner {
        env,
        config,
        state: TaskState::new(),
        steps: Vec::new(),
        last_output: None,
    };
    let mut position = 0;
    let mut broke = false;
    while runner.steps.len() < config.max_rounds {
        let round = runner.steps.len() + 1;
        let ledger_start = env.gateway.ledger().records().len();
        let action = if broke { ActionName::Terminate } else { workflow.action_at(position) };
        let (invocation, digest) =
            match fill_arguments(env, config, &runner.state, runner.last_output.as_deref(), round, action) {
                Ok(x) => x,
                Err(e) if broke => {
                    log::info!("static terminate arguments unusable: {e}");
                    break;
                }
                Err(e) => {
                    let msg = format!("argument filling for {action} failed in round {round}: {e}");
                    return runner.finish(TerminalKind::Error, FinalSolution::empty(), false, Some(msg), ledger_start);
                }
            };
        let head = workflow.is_loop_head(position);
        match runner.step(invocation, digest, ledger_start) {
            StepOutcome::Continue(output) => {
                if !broke && head && loop_breaks(workflow, &output, action) {
                    broke = true;
                }
            }
            StepOutcome::Rejected if broke => break,
            StepOutcome::Rejected => {}
            StepOutcome::Finished(solution) => {
                let start = env.gateway.ledger().records().len();
                return runner.finish(TerminalKind::Finish, solution, false, None, start);
            }
            StepOutcome::Fatal(msg) => {
                let start = env.gateway.ledger().records().len();
                return runner.finish(TerminalKind::Error, FinalSolution::empty(), false, Some(msg), start);
            }
        }
        position += 1;
    }
    let start = env.gateway.ledger().records().len();
    runner.forced(start)
}

impl FromStr for Workflow {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Workflow::named(s)
    }
}

/// One line per action: description and write set.
pub fn action_catalog() -> String {
    let mut out = String::new();
    for a in ActionName::ALL {
        let c = contract(a);
        let writes: Vec<String> = c.writes.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("{a}: {} [writes: {}]\n", c.description, writes.join(", ")));
    }
    out
}

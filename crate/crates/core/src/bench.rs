//! Benchmark harness: task manifests for the six task types, the solving
//! criteria, the partial-fix constructor and pass@k aggregation.
//!
//! Evaluation always happens in a fresh workspace instantiated from the
//! manifest, so hidden suites and gold patches never reach the agent.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{parse_test_output, REPRODUCER_PATH};
use crate::coverage::CoverageReport;
use crate::diff::{DiffParseError, Patch};
use crate::index::{is_test_path, CodeIndex};
use crate::state::{compose_patches, DiffId, DiffKind};
use crate::workspace::{Workspace, WorkspaceError, WorkspaceSource, WorkspaceSpec, SCRATCH_DIR};

pub const TESTS_PLACEHOLDER: &str = "{tests}";
pub const LCOV_PLACEHOLDER: &str = "{lcov}";
const LCOV_OUTPUT: &str = ".use-engine/coverage.lcov";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Manifest { path: String, message: String },
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error(transparent)]
    Diff(#[from] DiffParseError),
    #[error("partial patch does not apply: {0}")]
    PatchDoesNotApply(String),
    #[error("pass@k: {0}")]
    PassAtK(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    ProgramRepair,
    RegressionTesting,
    CodeGeneration,
    TestGeneration,
    PartialFix,
    FeatureDevelopment,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::ProgramRepair,
        TaskType::RegressionTesting,
        TaskType::CodeGeneration,
        TaskType::TestGeneration,
        TaskType::PartialFix,
        TaskType::FeatureDevelopment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::ProgramRepair => "program-repair",
            TaskType::RegressionTesting => "regression-testing",
            TaskType::CodeGeneration => "code-generation",
            TaskType::TestGeneration => "test-generation",
            TaskType::PartialFix => "partial-fix",
            TaskType::FeatureDevelopment => "feature-development",
        }
    }

    /// Static workflow used when dynamic selection is switched off.
    pub fn default_workflow(self) -> &'static str {
        match self {
            TaskType::ProgramRepair => "swe",
            TaskType::PartialFix => "swetry",
            TaskType::RegressionTesting => "swt",
            TaskType::CodeGeneration | TaskType::FeatureDevelopment => "repocod",
            TaskType::TestGeneration => "repotest",
        }
    }

    /// Diff kind the final solution is expected to be.
    pub fn solution_kind(self) -> DiffKind {
        match self {
            TaskType::RegressionTesting | TaskType::TestGeneration => DiffKind::Test,
            _ => DiffKind::Code,
        }
    }

    fn eval_kind(self) -> &'static str {
        match self {
            TaskType::RegressionTesting => "gold-patch",
            TaskType::TestGeneration => "target-method",
            _ => "hidden-suite",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task type `{s}`"))
    }
}

fn default_suite_dest() -> String {
    "hidden_tests".to_string()
}

/// How a solution is judged. Paths are relative to the manifest file until
/// [`load_task`] resolves them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalSpec {
    /// Copy `suite` into the workspace at `suite_dest` and run `command`.
    /// `coverage_command` is required for feature development, where the
    /// solution's own tests must also cover its code.
    HiddenSuite {
        suite: PathBuf,
        #[serde(default = "default_suite_dest")]
        suite_dest: String,
        command: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coverage_command: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_patch: Option<PathBuf>,
    },
    /// Candidate tests must cover every changed executable line of `patch`.
    GoldPatch {
        patch: PathBuf,
        coverage_command: String,
        /// Also require the tests to fail without the gold patch.
        #[serde(default)]
        strict: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_tests: Option<PathBuf>,
    },
    /// Candidate tests must cover every executable line of a method.
    TargetMethod {
        file: String,
        qualified_name: String,
        coverage_command: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_tests: Option<PathBuf>,
    },
}

impl EvalSpec {
    fn kind(&self) -> &'static str {
        match self {
            EvalSpec::HiddenSuite { .. } => "hidden-suite",
            EvalSpec::GoldPatch { .. } => "gold-patch",
            EvalSpec::TargetMethod { .. } => "target-method",
        }
    }

    /// Reference solution for the harness self-check, if the manifest has one.
    pub fn gold_solution(&self) -> Option<&Path> {
        match self {
            EvalSpec::HiddenSuite { gold_patch, .. } => gold_patch.as_deref(),
            EvalSpec::GoldPatch { gold_tests, .. } | EvalSpec::TargetMethod { gold_tests, .. } => gold_tests.as_deref(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            EvalSpec::HiddenSuite { suite, gold_patch, .. } => {
                fix(suite);
                gold_patch.as_mut().map(fix);
            }
            EvalSpec::GoldPatch { patch, gold_tests, .. } => {
                fix(patch);
                gold_tests.as_mut().map(fix);
            }
            EvalSpec::TargetMethod { gold_tests, .. } => {
                gold_tests.as_mut().map(fix);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extras {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_patch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_excerpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub id: String,
    pub task_type: TaskType,
    pub description: String,
    pub workspace: WorkspaceSpec,
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "is_default")]
    pub extras: Extras,
    /// Documentation globs for test-command inference; defaults when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub docs: Vec<String>,
}

fn is_default(e: &Extras) -> bool {
    *e == Extras::default()
}

const PARTIAL_PATCH_HEADING: &str = "A previous attempt produced the patch below. It is promising but does not resolve the issue; build on it or replace it.";

impl TaskManifest {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.id.trim().is_empty() {
            return Err(BenchError::Invalid("field `id` is empty".into()));
        }
        if self.description.trim().is_empty() {
            return Err(BenchError::Invalid("field `description` is empty".into()));
        }
        if self.eval.kind() != self.task_type.eval_kind() {
            return Err(BenchError::Invalid(format!(
                "field `eval.kind`: {} tasks are evaluated with `{}`, not `{}`",
                self.task_type,
                self.task_type.eval_kind(),
                self.eval.kind()
            )));
        }
        if self.task_type == TaskType::PartialFix
            && self.extras.partial_patch.as_deref().is_none_or(|p| p.trim().is_empty())
        {
            return Err(BenchError::Invalid(
                "field `extras.partial_patch` is required for partial-fix tasks".into(),
            ));
        }
        if let EvalSpec::HiddenSuite { coverage_command, .. } = &self.eval {
            if self.task_type == TaskType::FeatureDevelopment && coverage_command.is_none() {
                return Err(BenchError::Invalid(
                    "field `eval.coverage_command` is required for feature-development tasks".into(),
                ));
            }
        }
        self.workspace.validate()?;
        Ok(())
    }

    /// The text handed to the agent.
    pub fn agent_description(&self) -> String {
        let mut out = self.description.trim_end().to_string();
        if let Some(patch) = &self.extras.partial_patch {
            if !self.description.contains(patch.trim()) {
                out.push_str(&partial_section(patch));
            }
        }
        if let Some(doc) = &self.extras.doc_excerpt {
            out.push_str("\n\nDocumentation excerpt:\n");
            out.push_str(doc.trim_end());
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

fn partial_section(patch: &str) -> String {
    format!("\n\n{PARTIAL_PATCH_HEADING}\n```diff\n{}\n```", patch.trim_end())
}

/// Loads and validates a manifest; relative paths are resolved against the
/// manifest's directory.
pub fn load_task(path: &Path) -> Result<TaskManifest, BenchError> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut task: TaskManifest = toml::from_str(&text).map_err(|e| BenchError::Manifest {
        path: path.display().to_string(),
        message: e.message().to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let WorkspaceSource::Directory { path: dir } = &mut task.workspace.source {
        if dir.is_relative() {
            *dir = base.join(&*dir);
        }
    }
    task.eval.resolve(base);
    task.validate().map_err(|e| BenchError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(task)
}

/// Loads every `*.toml` manifest in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<TaskManifest>, BenchError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_task(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "kebab-case")]
pub enum Metric {
    TestSuite {
        passed: u64,
        total: u64,
    },
    PatchCoverage {
        covered: usize,
        total: usize,
        fraction: f64,
    },
    MethodCoverage {
        covered: usize,
        total: usize,
        fraction: f64,
    },
    Feature {
        passed: u64,
        total: u64,
        covered: usize,
        lines: usize,
        fraction: f64,
    },
}

impl Metric {
    /// Coverage fraction, for coverage-based criteria.
    pub fn fraction(&self) -> Option<f64> {
        match self {
            Metric::TestSuite { .. } => None,
            Metric::PatchCoverage { fraction, .. }
            | Metric::MethodCoverage { fraction, .. }
            | Metric::Feature { fraction, .. } => Some(*fraction),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::TestSuite { passed, total } => write!(f, "{passed}/{total} hidden tests pass"),
            Metric::PatchCoverage { covered, total, fraction } => {
                write!(f, "patch coverage {covered}/{total} ({fraction:.3})")
            }
            Metric::MethodCoverage { covered, total, fraction } => {
                write!(f, "method coverage {covered}/{total} ({fraction:.3})")
            }
            Metric::Feature {
                passed,
                total,
                covered,
                lines,
                fraction,
            } => write!(
                f,
                "{passed}/{total} hidden tests pass; own tests cover {covered}/{lines} new lines ({fraction:.3})"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub resolved: bool,
    pub metric: Metric,
    pub detail: String,
}

fn fraction(covered: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

struct Coverage {
    covered: usize,
    total: usize,
}

/// Composes `patches` against the pristine workspace and applies them.
fn apply_all(ws: &Workspace, patches: &[(&str, &Patch)]) -> Result<(), String> {
    let list: Vec<(DiffId, Patch)> = patches
        .iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(l, p)| (DiffId(l.to_string()), (*p).clone()))
        .collect();
    let composed = compose_patches(&list, ws).map_err(|e| e.to_string())?;
    let report = ws.apply_patch(&composed).map_err(|e| e.to_string())?;
    if report.applied() {
        Ok(())
    } else {
        Err(report.failure_text())
    }
}

fn is_candidate_test(path: &str) -> bool {
    is_test_path(path) && path != REPRODUCER_PATH
}

fn test_files(patch: &Patch) -> Vec<String> {
    patch
        .files
        .iter()
        .filter(|f| !f.is_deletion() && is_candidate_test(f.path()))
        .map(|f| f.path().to_string())
        .collect()
}

fn render_command(template: &str, tests: &[String]) -> String {
    let quoted = shlex::try_join(tests.iter().map(String::as_str)).unwrap_or_else(|_| tests.join(" "));
    template.replace(TESTS_PLACEHOLDER, &quoted).replace(LCOV_PLACEHOLDER, LCOV_OUTPUT)
}

/// Runs the candidate tests under the coverage command and parses the
/// resulting report. Failing or crashing tests yield `Err`.
fn run_coverage(ws: &Workspace, template: &str, tests: &[String]) -> Result<CoverageReport, String> {
    let report_path = ws.root().join(LCOV_OUTPUT);
    fs::create_dir_all(ws.root().join(SCRATCH_DIR)).map_err(|e| e.to_string())?;
    let _ = fs::remove_file(&report_path);
    let command = render_command(template, tests);
    let result = ws.run_command(&command, None).map_err(|e| e.to_string())?;
    if result.timed_out || result.exit_code != 0 {
        let summary = parse_test_output(&result);
        return Err(format!(
            "candidate tests fail on the evaluated program ({}; exit {})\n{}",
            summary.headline(),
            result.exit_code,
            tail(&result.combined_output(), 1500)
        ));
    }
    let text = fs::read_to_string(&report_path).map_err(|_| {
        format!(
            "coverage command produced no report at {LCOV_OUTPUT}\n{}",
            tail(&result.combined_output(), 1500)
        )
    })?;
    CoverageReport::parse_lcov(&text, Some(&ws.root().to_string_lossy())).map_err(|e| e.to_string())
}

fn tail(text: &str, max: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    chars[chars.len().saturating_sub(max)..].iter().collect()
}

fn is_code_line(text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && !t.starts_with('#')
}

/// Coverage of the executable lines added by `patch` outside test files.
fn added_line_coverage(patch: &Patch, report: &CoverageReport) -> Coverage {
    let mut cov = Coverage { covered: 0, total: 0 };
    for (file, lines) in patch.added_lines() {
        if is_test_path(&file) || file == REPRODUCER_PATH {
            continue;
        }
        for (n, text) in lines {
            if !is_code_line(&text) {
                continue;
            }
            match (report.has_file(&file), report.hits(&file, n as u32)) {
                (true, None) => {}
                (_, Some(h)) if h > 0 => {
                    cov.total += 1;
                    cov.covered += 1;
                }
                _ => cov.total += 1,
            }
        }
    }
    cov
}

fn read_patch(path: &Path) -> Result<Patch, BenchError> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(Patch::parse(&text)?)
}

fn install_suite(ws: &Workspace, suite: &Path, dest: &str) -> Result<usize, BenchError> {
    let mut n = 0;
    for entry in walkdir::WalkDir::new(suite).sort_by_file_name() {
        let entry = entry.map_err(|e| BenchError::Invalid(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(suite).unwrap_or(entry.path());
        let rel = rel.to_string_lossy().replace('\\', "/");
        if rel.contains("__pycache__") {
            continue;
        }
        ws.write_file(&format!("{}/{rel}", dest.trim_end_matches('/')), &fs::read_to_string(entry.path())?)?;
        n += 1;
    }
    Ok(n)
}

/// Judges `solution` (a unified diff against the pristine project; empty
/// text is the empty solution). Malformed diffs are errors; everything that
/// goes wrong while evaluating a well-formed diff is an unresolved verdict.
pub fn evaluate(task: &TaskManifest, solution: &str) -> Result<Verdict, BenchError> {
    let patch = Patch::parse(solution)?;
    match &task.eval {
        EvalSpec::HiddenSuite {
            suite,
            suite_dest,
            command,
            coverage_command,
            ..
        } => {
            let feature = (task.task_type == TaskType::FeatureDevelopment)
                .then_some(coverage_command.as_deref())
                .flatten();
            eval_hidden_suite(task, &patch, suite, suite_dest, command, feature)
        }
        EvalSpec::GoldPatch {
            patch: gold,
            coverage_command,
            strict,
            ..
        } => eval_gold_patch(task, &patch, &read_patch(gold)?, coverage_command, *strict),
        EvalSpec::TargetMethod {
            file,
            qualified_name,
            coverage_command,
            ..
        } => eval_target_method(task, &patch, file, qualified_name, coverage_command),
    }
}

fn eval_hidden_suite(
    task: &TaskManifest,
    patch: &Patch,
    suite: &Path,
    dest: &str,
    command: &str,
    feature_coverage: Option<&str>,
) -> Result<Verdict, BenchError> {
    let ws = Workspace::open(&task.workspace)?;
    let unresolved = |detail: String| {
        let metric = if feature_coverage.is_some() {
            Metric::Feature {
                passed: 0,
                total: 0,
                covered: 0,
                lines: 0,
                fraction: 0.0,
            }
        } else {
            Metric::TestSuite { passed: 0, total: 0 }
        };
        Ok(Verdict {
            resolved: false,
            metric,
            detail,
        })
    };
    if let Err(e) = apply_all(&ws, &[("solution", patch)]) {
        return unresolved(format!("solution does not apply: {e}"));
    }
    if install_suite(&ws, suite, dest)? == 0 {
        return Err(BenchError::Invalid(format!("hidden suite {} is empty", suite.display())));
    }
    let result = ws.run_command(command, None)?;
    let summary = parse_test_output(&result);
    let total = summary.passed + summary.failed + summary.errors;
    let suite_ok = result.exit_code == 0 && !result.timed_out && summary.failed == 0 && summary.errors == 0 && summary.passed > 0;
    let mut detail = format!("hidden suite: {}", summary.headline());
    if !suite_ok {
        detail.push('\n');
        detail.push_str(&tail(&result.combined_output(), 1500));
    }
    let Some(template) = feature_coverage else {
        return Ok(Verdict {
            resolved: suite_ok,
            metric: Metric::TestSuite {
                passed: summary.passed,
                total,
            },
            detail,
        });
    };
    let tests = test_files(patch);
    let (cov, note) = if tests.is_empty() {
        (Coverage { covered: 0, total: 1 }, "the solution adds no tests".to_string())
    } else {
        match run_coverage(&ws, template, &tests) {
            Ok(report) => {
                let c = added_line_coverage(patch, &report);
                let note = format!("own tests cover {}/{} new executable lines", c.covered, c.total);
                (c, note)
            }
            Err(e) => (Coverage { covered: 0, total: 1 }, e),
        }
    };
    let frac = fraction(cov.covered, cov.total);
    Ok(Verdict {
        resolved: suite_ok && frac >= 1.0,
        metric: Metric::Feature {
            passed: summary.passed,
            total,
            covered: cov.covered,
            lines: cov.total,
            fraction: frac,
        },
        detail: format!("{detail}\n{note}"),
    })
}

fn coverage_verdict(method: bool, cov: Coverage, detail: String) -> Verdict {
    let frac = fraction(cov.covered, cov.total);
    let metric = if method {
        Metric::MethodCoverage {
            covered: cov.covered,
            total: cov.total,
            fraction: frac,
        }
    } else {
        Metric::PatchCoverage {
            covered: cov.covered,
            total: cov.total,
            fraction: frac,
        }
    };
    Verdict {
        resolved: frac >= 1.0,
        metric,
        detail,
    }
}

fn zero_coverage(method: bool, total: usize, detail: String) -> Verdict {
    let mut v = coverage_verdict(method, Coverage { covered: 0, total: total.max(1) }, detail);
    v.resolved = false;
    v
}

fn gold_line_count(gold: &Patch) -> usize {
    gold.added_lines()
        .iter()
        .filter(|(f, _)| !is_test_path(f))
        .map(|(_, lines)| lines.iter().filter(|(_, t)| is_code_line(t)).count())
        .sum()
}

fn eval_gold_patch(task: &TaskManifest, patch: &Patch, gold: &Patch, template: &str, strict: bool) -> Result<Verdict, BenchError> {
    let tests_patch = patch.filter_files(is_candidate_test);
    let tests = test_files(&tests_patch);
    let estimate = gold_line_count(gold);
    if tests.is_empty() {
        return Ok(zero_coverage(false, estimate, "the solution contains no test files".into()));
    }
    let ws = Workspace::open(&task.workspace)?;
    if strict {
        if let Err(e) = apply_all(&ws, &[("solution", &tests_patch)]) {
            return Ok(zero_coverage(false, estimate, format!("solution does not apply: {e}")));
        }
        let result = ws.run_command(&render_command(template, &tests), None)?;
        if result.exit_code == 0 && !result.timed_out {
            return Ok(zero_coverage(
                false,
                estimate,
                "strict mode: candidate tests pass on the unpatched program".into(),
            ));
        }
    }
    if let Err(e) = apply_all(&ws, &[("gold", gold), ("solution", &tests_patch)]) {
        return Ok(zero_coverage(false, estimate, format!("solution does not apply with the gold patch: {e}")));
    }
    match run_coverage(&ws, template, &tests) {
        Ok(report) => {
            let cov = added_line_coverage(gold, &report);
            let detail = format!(
                "tests {} cover {}/{} changed executable lines of the gold patch",
                tests.join(", "),
                cov.covered,
                cov.total
            );
            Ok(coverage_verdict(false, cov, detail))
        }
        Err(e) => Ok(zero_coverage(false, estimate, e)),
    }
}

fn eval_target_method(
    task: &TaskManifest,
    patch: &Patch,
    file: &str,
    qualified_name: &str,
    template: &str,
) -> Result<Verdict, BenchError> {
    let ws = Workspace::open(&task.workspace)?;
    let index = CodeIndex::build(&ws).map_err(|e| BenchError::Invalid(e.to_string()))?;
    let location = index
        .locate(file, Some(qualified_name))
        .ok_or_else(|| BenchError::Invalid(format!("target `{file}::{qualified_name}` not found")))?;
    let entry = index.file(file).expect("located file is indexed");
    let span = location.line_span;
    let body: Vec<(usize, String)> = entry
        .text_of(span)
        .lines()
        .enumerate()
        .map(|(i, t)| (span.start + i, t.to_string()))
        .skip(1)
        .filter(|(_, t)| is_code_line(t))
        .collect();
    let tests_patch = patch.filter_files(is_candidate_test);
    let tests = test_files(&tests_patch);
    if tests.is_empty() {
        return Ok(zero_coverage(true, body.len(), "the solution contains no test files".into()));
    }
    if let Err(e) = apply_all(&ws, &[("solution", &tests_patch)]) {
        return Ok(zero_coverage(true, body.len(), format!("solution does not apply: {e}")));
    }
    let report = match run_coverage(&ws, template, &tests) {
        Ok(r) => r,
        Err(e) => return Ok(zero_coverage(true, body.len(), e)),
    };
    let mut cov = Coverage { covered: 0, total: 0 };
    for (n, _) in &body {
        match (report.has_file(file), report.hits(file, *n as u32)) {
            (true, None) => {}
            (_, Some(h)) if h > 0 => {
                cov.covered += 1;
                cov.total += 1;
            }
            _ => cov.total += 1,
        }
    }
    let detail = format!(
        "tests {} cover {}/{} executable lines of {file}::{qualified_name}",
        tests.join(", "),
        cov.covered,
        cov.total
    );
    Ok(coverage_verdict(true, cov, detail))
}

/// Turns a repair task into a partial-fix task carrying a previous,
/// promising but failed patch.
pub fn make_partial_fix_task(base: &TaskManifest, failed_patch: &str) -> Result<TaskManifest, BenchError> {
    if base.task_type != TaskType::ProgramRepair {
        return Err(BenchError::Invalid(format!(
            "partial-fix tasks are built from program-repair tasks, not {}",
            base.task_type
        )));
    }
    let patch = Patch::parse(failed_patch)?;
    if patch.is_empty() {
        return Err(BenchError::PatchDoesNotApply("the patch is empty".into()));
    }
    let ws = Workspace::open(&base.workspace)?;
    apply_all(&ws, &[("partial", &patch)]).map_err(BenchError::PatchDoesNotApply)?;
    let mut task = base.clone();
    task.id = format!("{}-partial", base.id);
    task.task_type = TaskType::PartialFix;
    task.description = format!("{}{}", base.description.trim_end(), partial_section(failed_patch));
    task.extras.partial_patch = Some(failed_patch.to_string());
    Ok(task)
}

/// Fraction of tasks with at least one success among their first `k` runs.
pub fn pass_at_k(results: &[Vec<bool>], k: usize) -> Result<f64, BenchError> {
    if k == 0 {
        return Err(BenchError::PassAtK("k must be positive".into()));
    }
    if results.is_empty() {
        return Err(BenchError::PassAtK("no tasks".into()));
    }
    if let Some((i, runs)) = results.iter().enumerate().find(|(_, r)| r.len() < k) {
        return Err(BenchError::PassAtK(format!("task {i} has {} runs, fewer than k = {k}", runs.len())));
    }
    let solved = results.iter().filter(|runs| runs[..k].iter().any(|&b| b)).count();
    Ok(solved as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub task_id: String,
    pub gold: Option<Verdict>,
    pub empty: Verdict,
}

impl SelfCheck {
    pub fn ok(&self) -> bool {
        self.gold.as_ref().is_none_or(|g| g.resolved) && !self.empty.resolved
    }
}

/// Gold solution must resolve and the empty solution must not.
pub fn self_check(task: &TaskManifest) -> Result<SelfCheck, BenchError> {
    let gold = match task.eval.gold_solution() {
        Some(path) => Some(evaluate(task, &fs::read_to_string(path)?)?),
        None => None,
    };
    Ok(SelfCheck {
        task_id: task.id.clone(),
        gold,
        empty: evaluate(task, "")?,
    })
}

/// Per-run result consumed by the stats command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub task_type: TaskType,
    pub run: usize,
    pub resolved: bool,
    pub metric: Option<Metric>,
    pub cost_usd: f64,
    pub wall_time: f64,
}

/// Task types present in `tasks`, in canonical order.
pub fn task_types(tasks: &[TaskManifest]) -> BTreeSet<TaskType> {
    tasks.iter().map(|t| t.task_type).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(kind: &str, task_type: &str) -> String {
        let eval = match kind {
            "hidden-suite" => "kind = \"hidden-suite\"\nsuite = \"hidden\"\ncommand = \"true\"",
            "gold-patch" => "kind = \"gold-patch\"\npatch = \"gold.diff\"\ncoverage_command = \"true\"",
            _ => "kind = \"target-method\"\nfile = \"a.py\"\nqualified_name = \"f\"\ncoverage_command = \"true\"",
        };
        format!(
            "id = \"t\"\ntask_type = \"{task_type}\"\ndescription = \"fix it\"\n\n[workspace.source]\ndirectory = \"proj\"\n\n[eval]\n{eval}\n"
        )
    }

    fn load_str(text: &str) -> Result<TaskManifest, BenchError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.toml");
        fs::write(&path, text).unwrap();
        load_task(&path)
    }

    #[test]
    fn loads_and_resolves_paths() {
        let t = load_str(&manifest("hidden-suite", "program-repair")).unwrap();
        assert_eq!(t.task_type, TaskType::ProgramRepair);
        match (&t.workspace.source, &t.eval) {
            (WorkspaceSource::Directory { path }, EvalSpec::HiddenSuite { suite, suite_dest, .. }) => {
                assert!(path.is_absolute() && path.ends_with("proj"));
                assert!(suite.is_absolute());
                assert_eq!(suite_dest, "hidden_tests");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = load_str("id = \"t\"\ntask_type = \"program-repair\"\ndescription = \"x\"\n[workspace.source]\ndirectory = \"p\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("eval"), "{err}");
        let err = load_str(&manifest("gold-patch", "program-repair")).unwrap_err().to_string();
        assert!(err.contains("eval.kind"), "{err}");
        let err = load_str(&manifest("hidden-suite", "partial-fix")).unwrap_err().to_string();
        assert!(err.contains("extras.partial_patch"), "{err}");
        let err = load_str(&manifest("hidden-suite", "feature-development")).unwrap_err().to_string();
        assert!(err.contains("coverage_command"), "{err}");
        assert!(load_str(&manifest("target-method", "test-generation")).is_ok());
    }

    #[test]
    fn pass_at_k_basics() {
        let mut results = vec![vec![true]; 228];
        results.extend(vec![vec![false]; 272]);
        assert_eq!(pass_at_k(&results, 1).unwrap(), 0.456);
        let late = vec![vec![false, false, true, false, false]];
        assert_eq!(pass_at_k(&late, 1).unwrap(), 0.0);
        assert_eq!(pass_at_k(&late, 5).unwrap(), 1.0);
        assert!(pass_at_k(&late, 6).is_err());
        assert!(pass_at_k(&late, 0).is_err());
        assert_eq!(pass_at_k(&vec![vec![false; 3]; 4], 3).unwrap(), 0.0);
    }

    #[test]
    fn command_rendering_quotes_paths() {
        let cmd = render_command("run {tests} --out {lcov}", &["tests/a b.py".into(), "tests/c.py".into()]);
        assert_eq!(cmd, "run 'tests/a b.py' tests/c.py --out .use-engine/coverage.lcov");
    }

    #[test]
    fn added_line_coverage_uses_report_executability() {
        let patch = Patch::parse(
            "--- a/m.py\n+++ b/m.py\n@@ -1,1 +1,5 @@\n x = 1\n+# note\n+y = 2\n+z = 3\n+\n",
        )
        .unwrap();
        let report = CoverageReport::parse_lcov("SF:m.py\nDA:1,1\nDA:3,1\nDA:4,0\nend_of_record\n", None).unwrap();
        let c = added_line_coverage(&patch, &report);
        assert_eq!((c.covered, c.total), (1, 2));
        let absent = added_line_coverage(&patch, &CoverageReport::default());
        assert_eq!((absent.covered, absent.total), (0, 2));
        assert_eq!(fraction(0, 0), 1.0);
    }
}

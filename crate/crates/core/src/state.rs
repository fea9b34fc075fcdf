//! Task state shared among actions: code and test locations, execution
//! records, and the append-only diff store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::CoverageReport;
use crate::diff::{self, DiffParseError, HunkFailure, Patch, TextTree};

/// Lines kept in a location excerpt.
pub const EXCERPT_MAX_LINES: usize = 40;
/// Character budget for the state summary shown to the Meta-Agent.
pub const DEFAULT_SUMMARY_BUDGET: usize = 8_000;
/// Most recent execution records listed in a summary.
pub const SUMMARY_MAX_RECORDS: usize = 10;
/// Test selector naming the standalone reproduction test.
pub const REPRODUCER_SELECTOR: &str = "reproducer";

pub const EMPTY_STATE_SUMMARY: &str =
    "Task state is empty: no code locations, no test locations, no diffs, no execution records.";
pub const ELIDED_RECORDS_MARKER: &str = "…earlier records elided";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("invalid location: {0}")]
    InvalidLocation(String),
    #[error("diff rejected: {0}")]
    MalformedDiff(#[from] DiffParseError),
    #[error("unknown parent diff `{0}`")]
    UnknownParent(DiffId),
    #[error("unknown diff `{0}`")]
    UnknownDiff(DiffId),
    #[error("reproducer `{0}` must be a test diff")]
    ReproducerNotTest(DiffId),
    #[error("invalid execution record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("unknown diff `{0}`")]
    UnknownDiff(DiffId),
    #[error("diffs `{first}` and `{second}` conflict in {file}: {detail}")]
    Conflict {
        first: DiffId,
        second: DiffId,
        file: String,
        detail: String,
    },
    #[error("diff `{id}` does not apply to the baseline of {file}: {detail}")]
    Stale { id: DiffId, file: String, detail: String },
    #[error(transparent)]
    Parse(#[from] DiffParseError),
}

/// Opaque diff identifier, unique for the lifetime of a state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiffId(pub String);

impl DiffId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DiffId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DiffId {
    fn from(s: &str) -> Self {
        DiffId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Class,
    Method,
    Function,
    Snippet,
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitKind::Class => "class",
            UnitKind::Method => "method",
            UnitKind::Function => "function",
            UnitKind::Snippet => "snippet",
        })
    }
}

/// Inclusive, 1-based line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

impl LineSpan {
    pub fn new(start: usize, end: usize) -> Result<Self, StateError> {
        if start == 0 || start > end {
            return Err(StateError::InvalidLocation(format!("bad line span {start}-{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, line: usize) -> bool {
        (self.start..=self.end).contains(&line)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for LineSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

/// Caps an excerpt at `max_lines`, appending a marker when lines are dropped.
pub fn cap_excerpt(text: &str, max_lines: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() <= max_lines {
        return lines.join("\n");
    }
    let mut out = lines[..max_lines].join("\n");
    out.push_str(&format!("\n… ({} more lines)", lines.len() - max_lines));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeLocation {
    pub file: String,
    pub unit_kind: UnitKind,
    pub qualified_name: String,
    pub line_span: LineSpan,
    pub excerpt: String,
}

impl CodeLocation {
    pub fn new(
        file: impl Into<String>,
        unit_kind: UnitKind,
        qualified_name: impl Into<String>,
        line_span: LineSpan,
        excerpt: &str,
    ) -> Result<Self, StateError> {
        let file = file.into();
        diff::validate_relative_path(&file).map_err(StateError::InvalidLocation)?;
        Ok(Self {
            file,
            unit_kind,
            qualified_name: qualified_name.into(),
            line_span,
            excerpt: cap_excerpt(excerpt, EXCERPT_MAX_LINES),
        })
    }

    fn key(&self) -> (&str, &str, LineSpan) {
        (&self.file, &self.qualified_name, self.line_span)
    }

    fn headline(&self) -> String {
        format!(
            "{}:{} {} {}",
            self.file, self.line_span, self.unit_kind, self.qualified_name
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestLocation {
    #[serde(flatten)]
    pub location: CodeLocation,
    pub framework_hint: Option<String>,
}

impl TestLocation {
    pub fn new(location: CodeLocation, framework_hint: Option<String>) -> Result<Self, StateError> {
        if location.unit_kind == UnitKind::Class {
            return Err(StateError::InvalidLocation(format!(
                "test location `{}` must be a method, function or snippet",
                location.qualified_name
            )));
        }
        Ok(Self {
            location,
            framework_hint,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffKind {
    Code,
    Test,
}

impl fmt::Display for DiffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffKind::Code => "code",
            DiffKind::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diff {
    pub id: DiffId,
    pub kind: DiffKind,
    pub text: String,
    /// Action that produced the diff.
    pub origin: String,
    pub parents: Vec<DiffId>,
    pub summary: String,
}

/// A diff before it receives an id.
#[derive(Debug, Clone)]
pub struct DiffDraft {
    pub kind: DiffKind,
    pub text: String,
    pub origin: String,
    pub parents: Vec<DiffId>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRecord {
    pub diff_selection: Vec<DiffId>,
    /// Test file paths, or [`REPRODUCER_SELECTOR`].
    pub test_selection: Vec<String>,
    pub command: String,
    pub exit_status: i32,
    pub failure_summary: String,
    pub coverage: Option<CoverageReport>,
    /// Seconds. Excluded from trajectory logs, which must be reproducible.
    pub wall_time: f64,
}

impl ExecRecord {
    pub fn passed(&self) -> bool {
        self.exit_status == 0
    }
}

/// Several diffs folded into one, relative to the pristine baseline.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompositeDiff {
    pub ids: Vec<DiffId>,
    pub patch: Patch,
}

impl CompositeDiff {
    pub fn from_patch(patch: Patch) -> Self {
        Self {
            ids: Vec::new(),
            patch,
        }
    }

    pub fn text(&self) -> String {
        self.patch.render()
    }

    pub fn is_empty(&self) -> bool {
        self.patch.is_empty()
    }
}

/// Pristine file contents, as seen before any diff is applied.
pub trait BaselineSource {
    fn baseline_text(&self, path: &str) -> Option<String>;
}

impl BaselineSource for TextTree {
    fn baseline_text(&self, path: &str) -> Option<String> {
        self.get(path).cloned()
    }
}

/// Parts of the task state, used to declare and check action write sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateField {
    CodeLocations,
    TestLocations,
    ExecRecords,
    DiffStore,
    Reproducer,
}

impl fmt::Display for StateField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateField::CodeLocations => "code_locations",
            StateField::TestLocations => "test_locations",
            StateField::ExecRecords => "exec_records",
            StateField::DiffStore => "diff_store",
            StateField::Reproducer => "reproducer",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub code_locations: Vec<CodeLocation>,
    pub test_locations: Vec<TestLocation>,
    pub exec_records: Vec<ExecRecord>,
    pub diff_store: IndexMap<DiffId, Diff>,
    pub reproducer: Option<DiffId>,
    next_diff_seq: u64,
}

impl TaskState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn diff(&self, id: &DiffId) -> Option<&Diff> {
        self.diff_store.get(id)
    }

    pub fn diffs(&self) -> impl Iterator<Item = &Diff> {
        self.diff_store.values()
    }

    pub fn add_diff(&mut self, draft: DiffDraft) -> Result<DiffId, StateError> {
        Patch::parse(&draft.text)?;
        if let Some(missing) = draft.parents.iter().find(|p| !self.diff_store.contains_key(*p)) {
            return Err(StateError::UnknownParent(missing.clone()));
        }
        self.next_diff_seq += 1;
        let id = DiffId(format!("d{}", self.next_diff_seq));
        self.diff_store.insert(
            id.clone(),
            Diff {
                id: id.clone(),
                kind: draft.kind,
                text: draft.text,
                origin: draft.origin,
                parents: draft.parents,
                summary: draft.summary,
            },
        );
        Ok(id)
    }

    pub fn set_reproducer(&mut self, id: &DiffId) -> Result<(), StateError> {
        let diff = self.diff(id).ok_or_else(|| StateError::UnknownDiff(id.clone()))?;
        if diff.kind != DiffKind::Test {
            return Err(StateError::ReproducerNotTest(id.clone()));
        }
        self.reproducer = Some(id.clone());
        Ok(())
    }

    pub fn record_execution(&mut self, record: ExecRecord) -> Result<(), StateError> {
        if let Some(missing) = record.diff_selection.iter().find(|d| !self.diff_store.contains_key(*d)) {
            return Err(StateError::UnknownDiff(missing.clone()));
        }
        if record.wall_time.is_nan() || record.wall_time < 0.0 {
            return Err(StateError::InvalidRecord(format!("negative wall time {}", record.wall_time)));
        }
        self.exec_records.push(record);
        Ok(())
    }

    /// Merges code locations, deduplicating on (file, qualified name, span).
    /// Returns the number of genuinely new entries.
    pub fn merge_code_locations(&mut self, found: impl IntoIterator<Item = CodeLocation>) -> usize {
        let mut added = 0;
        for loc in found {
            if !self.code_locations.iter().any(|l| l.key() == loc.key()) {
                self.code_locations.push(loc);
                added += 1;
            }
        }
        added
    }

    pub fn merge_test_locations(&mut self, found: impl IntoIterator<Item = TestLocation>) -> usize {
        let mut added = 0;
        for loc in found {
            if !self
                .test_locations
                .iter()
                .any(|l| l.location.key() == loc.location.key())
            {
                self.test_locations.push(loc);
                added += 1;
            }
        }
        added
    }

    /// The given ids preceded by all their ancestors, in store insertion order.
    pub fn with_ancestors(&self, ids: &[DiffId]) -> Result<Vec<DiffId>, StateError> {
        let mut wanted = BTreeSet::new();
        let mut stack: Vec<DiffId> = ids.to_vec();
        while let Some(id) = stack.pop() {
            let diff = self.diff(&id).ok_or_else(|| StateError::UnknownDiff(id.clone()))?;
            if wanted.insert(id.clone()) {
                stack.extend(diff.parents.iter().cloned());
            }
        }
        Ok(self
            .diff_store
            .keys()
            .filter(|id| wanted.contains(*id))
            .cloned()
            .collect())
    }

    /// Folds the selected diffs, in the given order, onto the pristine
    /// baseline and re-diffs the result. Fails on overlapping hunks.
    pub fn compose_diffs(&self, ids: &[DiffId], baseline: &dyn BaselineSource) -> Result<CompositeDiff, ComposeError> {
        let mut patches = Vec::with_capacity(ids.len());
        for id in ids {
            let diff = self.diff(id).ok_or_else(|| ComposeError::UnknownDiff(id.clone()))?;
            patches.push((id.clone(), Patch::parse(&diff.text)?));
        }
        let patch = compose_patches(&patches, baseline)?;
        Ok(CompositeDiff {
            ids: ids.to_vec(),
            patch,
        })
    }

    /// Fields that differ between `before` and `self`.
    pub fn touched_fields(&self, before: &TaskState) -> BTreeSet<StateField> {
        let mut touched = BTreeSet::new();
        if self.code_locations != before.code_locations {
            touched.insert(StateField::CodeLocations);
        }
        if self.test_locations != before.test_locations {
            touched.insert(StateField::TestLocations);
        }
        if self.exec_records != before.exec_records {
            touched.insert(StateField::ExecRecords);
        }
        if self.diff_store != before.diff_store {
            touched.insert(StateField::DiffStore);
        }
        if self.reproducer != before.reproducer {
            touched.insert(StateField::Reproducer);
        }
        touched
    }

    pub fn is_empty(&self) -> bool {
        self.code_locations.is_empty()
            && self.test_locations.is_empty()
            && self.exec_records.is_empty()
            && self.diff_store.is_empty()
            && self.reproducer.is_none()
    }

    /// Deterministic text rendering bounded by `budget` characters.
    ///
    /// Over budget, the oldest execution records go first, then location
    /// excerpts; as a last resort the text is cut.
    pub fn render_summary(&self, budget: usize) -> String {
        let budget = budget.max(1);
        if self.is_empty() {
            return truncate_chars(EMPTY_STATE_SUMMARY, budget);
        }
        let mut shown = self.exec_records.len().min(SUMMARY_MAX_RECORDS);
        let mut excerpts = true;
        loop {
            let text = self.render_with(shown, excerpts);
            if text.chars().count() <= budget {
                return text;
            }
            if shown > 0 {
                shown -= 1;
            } else if excerpts {
                excerpts = false;
            } else {
                return truncate_chars(&text, budget);
            }
        }
    }

    fn render_with(&self, shown_records: usize, excerpts: bool) -> String {
        let mut out = String::new();
        let push_excerpt = |out: &mut String, excerpt: &str| {
            if excerpts && !excerpt.is_empty() {
                for line in excerpt.lines() {
                    out.push_str("    | ");
                    out.push_str(line);
                    out.push('\n');
                }
            }
        };

        out.push_str(&format!("Code locations ({}):\n", self.code_locations.len()));
        if self.code_locations.is_empty() {
            out.push_str("  (none)\n");
        }
        for loc in &self.code_locations {
            out.push_str(&format!("- {}\n", loc.headline()));
            push_excerpt(&mut out, &loc.excerpt);
        }

        out.push_str(&format!("Test locations ({}):\n", self.test_locations.len()));
        if self.test_locations.is_empty() {
            out.push_str("  (none)\n");
        }
        for loc in &self.test_locations {
            let hint = loc
                .framework_hint
                .as_deref()
                .map(|h| format!(" [{h}]"))
                .unwrap_or_default();
            out.push_str(&format!("- {}{}\n", loc.location.headline(), hint));
            push_excerpt(&mut out, &loc.location.excerpt);
        }

        out.push_str(&format!("Diff store ({}):\n", self.diff_store.len()));
        if self.diff_store.is_empty() {
            out.push_str("  (none)\n");
        }
        for diff in self.diff_store.values() {
            let parents = join_ids(&diff.parents);
            out.push_str(&format!(
                "- {} [{}] from {} parents=[{}]: {}\n",
                diff.id,
                diff.kind,
                diff.origin,
                parents,
                one_line(&diff.summary, 160)
            ));
        }
        match &self.reproducer {
            Some(id) => out.push_str(&format!("Reproducer: {id}\n")),
            None => out.push_str("Reproducer: (none)\n"),
        }

        let total = self.exec_records.len();
        out.push_str(&format!("Execution records ({total}):\n"));
        if total == 0 {
            out.push_str("  (none)\n");
        }
        let first_shown = total - shown_records.min(total);
        if first_shown > 0 {
            out.push_str(&format!("{ELIDED_RECORDS_MARKER} ({first_shown} not shown)\n"));
        }
        for (i, rec) in self.exec_records.iter().enumerate().skip(first_shown) {
            let outcome = if rec.passed() { "passed" } else { "failed" };
            let detail = if rec.failure_summary.is_empty() {
                String::new()
            } else {
                format!(": {}", one_line(&rec.failure_summary, 240))
            };
            out.push_str(&format!(
                "- #{} diffs=[{}] tests=[{}] exit={} {}{}\n",
                i + 1,
                join_ids(&rec.diff_selection),
                rec.test_selection.join(", "),
                rec.exit_status,
                outcome,
                detail
            ));
        }
        out
    }
}

fn join_ids(ids: &[DiffId]) -> String {
    ids.iter().map(DiffId::as_str).collect::<Vec<_>>().join(", ")
}

fn one_line(text: &str, max: usize) -> String {
    let joined = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ");
    truncate_chars(&joined, max)
}

pub(crate) fn truncate_chars(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        return text.to_string();
    }
    let mut out: String = text.chars().take(max.saturating_sub(1)).collect();
    out.push('…');
    out
}

/// Applies `patches` in order on top of `baseline`, returning the
/// normalized composite diff.
pub fn compose_patches(patches: &[(DiffId, Patch)], baseline: &dyn BaselineSource) -> Result<Patch, ComposeError> {
    let mut working: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut baseline_of: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut last_writer: BTreeMap<String, DiffId> = BTreeMap::new();

    let current = |path: &str, working: &BTreeMap<String, Option<String>>, baseline_of: &mut BTreeMap<String, Option<String>>| {
        let base = baseline_of
            .entry(path.to_string())
            .or_insert_with(|| baseline.baseline_text(path))
            .clone();
        working.get(path).cloned().unwrap_or(base)
    };

    for (id, patch) in patches {
        for fp in &patch.files {
            let source_path = fp.old_path.as_deref().unwrap_or(fp.path());
            let source = if fp.is_creation() {
                current(fp.path(), &working, &mut baseline_of)
            } else {
                current(source_path, &working, &mut baseline_of)
            };
            if let Some(new_path) = &fp.new_path {
                current(new_path, &working, &mut baseline_of);
            }
            match diff::apply_file_patch(source.as_deref(), fp) {
                Ok(result) => {
                    if let Some(old) = &fp.old_path {
                        if fp.new_path.as_ref() != Some(old) {
                            working.insert(old.clone(), None);
                            last_writer.insert(old.clone(), id.clone());
                        }
                    }
                    let target = fp.path().to_string();
                    working.insert(target.clone(), result);
                    last_writer.insert(target, id.clone());
                }
                Err(failures) => {
                    let detail = failures.iter().map(HunkFailure::to_string).collect::<Vec<_>>().join("; ");
                    let file = fp.path().to_string();
                    return Err(match last_writer.get(&file) {
                        Some(first) => ComposeError::Conflict {
                            first: first.clone(),
                            second: id.clone(),
                            file,
                            detail,
                        },
                        None => ComposeError::Stale {
                            id: id.clone(),
                            file,
                            detail,
                        },
                    });
                }
            }
        }
    }

    let files = working
        .iter()
        .filter_map(|(path, content)| {
            let base = baseline_of.get(path).cloned().flatten();
            diff::diff_file(path, base.as_deref(), content.as_deref())
        })
        .collect();
    Ok(Patch { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline() -> TextTree {
        let mut t = TextTree::new();
        t.insert("a.py".into(), "one\ntwo\nthree\nfour\nfive\nsix\nseven\neight\nnine\nten\n".into());
        t.insert("b.py".into(), "alpha\nbeta\n".into());
        t
    }

    fn draft_from(base: &TextTree, edits: &[(&str, &str)]) -> DiffDraft {
        let mut new = base.clone();
        for (path, body) in edits {
            new.insert(path.to_string(), body.to_string());
        }
        DiffDraft {
            kind: DiffKind::Code,
            text: diff::diff_trees(base, &new).render(),
            origin: "EditCode".into(),
            parents: vec![],
            summary: "edit".into(),
        }
    }

    fn loc(file: &str, name: &str, start: usize, end: usize) -> CodeLocation {
        CodeLocation::new(file, UnitKind::Method, name, LineSpan::new(start, end).unwrap(), "def x():\n    pass").unwrap()
    }

    fn record(diffs: Vec<DiffId>, tests: &[&str], exit: i32) -> ExecRecord {
        ExecRecord {
            diff_selection: diffs,
            test_selection: tests.iter().map(|s| s.to_string()).collect(),
            command: "pytest".into(),
            exit_status: exit,
            failure_summary: if exit == 0 { String::new() } else { "1 failed".into() },
            coverage: None,
            wall_time: 0.5,
        }
    }

    #[test]
    fn new_state_is_empty() {
        let state = TaskState::new();
        assert!(state.code_locations.is_empty() && state.test_locations.is_empty());
        assert!(state.exec_records.is_empty() && state.diff_store.is_empty());
        assert!(state.reproducer.is_none());
        assert_eq!(state.render_summary(DEFAULT_SUMMARY_BUDGET), EMPTY_STATE_SUMMARY);
    }

    #[test]
    fn fresh_state_unaffected_by_previous() {
        let mut first = TaskState::new();
        first.add_diff(draft_from(&baseline(), &[("b.py", "alpha\n")])).unwrap();
        let second = TaskState::new();
        assert!(second.diff_store.is_empty());
        assert_eq!(second, TaskState::default());
    }

    #[test]
    fn add_diff_assigns_distinct_ordered_ids() {
        let base = baseline();
        let mut state = TaskState::new();
        let d1 = state.add_diff(draft_from(&base, &[("b.py", "alpha\nBETA\n")])).unwrap();
        let d2 = state.add_diff(draft_from(&base, &[("a.py", "x\n")])).unwrap();
        assert_ne!(d1, d2);
        assert_eq!(state.diff_store.keys().cloned().collect::<Vec<_>>(), vec![d1, d2]);
    }

    #[test]
    fn add_diff_rejects_unknown_parent() {
        let mut state = TaskState::new();
        let mut draft = draft_from(&baseline(), &[("b.py", "x\n")]);
        draft.parents = vec![DiffId::from("d42")];
        assert_eq!(state.add_diff(draft), Err(StateError::UnknownParent(DiffId::from("d42"))));
        assert!(state.diff_store.is_empty());
    }

    #[test]
    fn add_diff_rejects_malformed_text() {
        let mut state = TaskState::new();
        let mut draft = draft_from(&baseline(), &[("b.py", "x\n")]);
        draft.text = "--- a/b.py\n+++ b/b.py\n@@ -1,2 +1,2 @@\n alpha\n".into();
        match state.add_diff(draft) {
            Err(StateError::MalformedDiff(e)) => assert!(e.line > 0),
            other => panic!("expected parse rejection, got {other:?}"),
        }
    }

    #[test]
    fn compose_empty_and_singleton() {
        let base = baseline();
        let mut state = TaskState::new();
        assert!(state.compose_diffs(&[], &base).unwrap().is_empty());
        let draft = draft_from(&base, &[("a.py", "one\ntwo\nTHREE\nfour\nfive\nsix\nseven\neight\nnine\nten\n")]);
        let expected = Patch::parse(&draft.text).unwrap();
        let d1 = state.add_diff(draft).unwrap();
        assert_eq!(state.compose_diffs(&[d1], &base).unwrap().patch, expected);
    }

    #[test]
    fn compose_disjoint_files() {
        let base = baseline();
        let mut state = TaskState::new();
        let d1 = state.add_diff(draft_from(&base, &[("a.py", "1\n")])).unwrap();
        let d2 = state.add_diff(draft_from(&base, &[("b.py", "2\n")])).unwrap();
        let composite = state.compose_diffs(&[d1, d2], &base).unwrap();
        assert_eq!(composite.patch.files.len(), 2);
        let mut tree = base.clone();
        diff::apply_to_tree(&mut tree, &composite.patch).unwrap();
        assert_eq!(tree["a.py"], "1\n");
        assert_eq!(tree["b.py"], "2\n");
    }

    #[test]
    fn compose_reports_conflict_with_both_ids() {
        let base = baseline();
        let mut state = TaskState::new();
        let d1 = state.add_diff(draft_from(&base, &[("b.py", "alpha\nB1\n")])).unwrap();
        let d2 = state.add_diff(draft_from(&base, &[("b.py", "alpha\nB2\n")])).unwrap();
        match state.compose_diffs(&[d1.clone(), d2.clone()], &base) {
            Err(ComposeError::Conflict { first, second, file, .. }) => {
                assert_eq!((first, second, file.as_str()), (d1, d2, "b.py"));
            }
            other => panic!("expected conflict, got {other:?}"),
        }
    }

    #[test]
    fn compose_stacked_diffs_follow_parents() {
        let base = baseline();
        let mut state = TaskState::new();
        let mid = {
            let mut t = base.clone();
            t.insert("b.py".into(), "alpha\nbeta\ngamma\n".into());
            t
        };
        let d1 = state.add_diff(draft_from(&base, &[("b.py", "alpha\nbeta\ngamma\n")])).unwrap();
        let mut d2 = draft_from(&mid, &[("b.py", "alpha\nbeta\ngamma\ndelta\n")]);
        d2.parents = vec![d1.clone()];
        let d2 = state.add_diff(d2).unwrap();
        assert_eq!(state.with_ancestors(std::slice::from_ref(&d2)).unwrap(), vec![d1.clone(), d2.clone()]);
        let composite = state.compose_diffs(&[d1, d2], &base).unwrap();
        let mut tree = base.clone();
        diff::apply_to_tree(&mut tree, &composite.patch).unwrap();
        assert_eq!(tree["b.py"], "alpha\nbeta\ngamma\ndelta\n");
    }

    #[test]
    fn record_execution_appends_without_dedup() {
        let base = baseline();
        let mut state = TaskState::new();
        let d1 = state.add_diff(draft_from(&base, &[("b.py", "x\n")])).unwrap();
        state.record_execution(record(vec![d1.clone()], &["tests/a.py"], 0)).unwrap();
        state.record_execution(record(vec![d1.clone()], &["tests/b.py"], 1)).unwrap();
        assert_eq!(state.exec_records.len(), 2);
        let err = state.record_execution(record(vec![DiffId::from("d9")], &["t"], 0)).unwrap_err();
        assert_eq!(err, StateError::UnknownDiff(DiffId::from("d9")));
        assert_eq!(state.exec_records.len(), 2);
    }

    #[test]
    fn merge_locations_dedups_on_span() {
        let mut state = TaskState::new();
        let found = vec![loc("a.py", "C.m", 3, 5), loc("a.py", "C.n", 7, 9)];
        assert_eq!(state.merge_code_locations(found.clone()), 2);
        assert_eq!(state.merge_code_locations(found), 0);
        // Same name at another span (overload or moved definition) is kept.
        assert_eq!(state.merge_code_locations(vec![loc("a.py", "C.m", 12, 14)]), 1);
        assert_eq!(state.code_locations.len(), 3);
    }

    #[test]
    fn test_location_rejects_class() {
        let class = CodeLocation::new("t.py", UnitKind::Class, "T", LineSpan::new(1, 2).unwrap(), "").unwrap();
        assert!(TestLocation::new(class, None).is_err());
    }

    #[test]
    fn location_rejects_escaping_path() {
        let span = LineSpan::new(1, 1).unwrap();
        assert!(CodeLocation::new("../x.py", UnitKind::Snippet, "x", span, "").is_err());
        assert!(CodeLocation::new("/abs.py", UnitKind::Snippet, "x", span, "").is_err());
        assert!(LineSpan::new(5, 4).is_err());
    }

    #[test]
    fn excerpt_is_capped() {
        let long: String = (1..=100).map(|i| format!("line {i}\n")).collect();
        let l = CodeLocation::new("a.py", UnitKind::Function, "f", LineSpan::new(1, 100).unwrap(), &long).unwrap();
        assert_eq!(l.excerpt.lines().count(), EXCERPT_MAX_LINES + 1);
        assert!(l.excerpt.ends_with("(60 more lines)"));
    }

    #[test]
    fn summary_is_deterministic_and_lists_everything() {
        let base = baseline();
        let mut state = TaskState::new();
        state.merge_code_locations(vec![loc("a.py", "C.m", 3, 5)]);
        let d1 = state.add_diff(draft_from(&base, &[("b.py", "x\n")])).unwrap();
        state.record_execution(record(vec![d1], &["reproducer"], 1)).unwrap();
        let a = state.render_summary(DEFAULT_SUMMARY_BUDGET);
        let b = state.render_summary(DEFAULT_SUMMARY_BUDGET);
        assert_eq!(a, b);
        assert!(a.contains("a.py:3-5 method C.m"));
        assert!(a.contains("- d1 [code] from EditCode parents=[]: edit"));
        assert!(a.contains("tests=[reproducer] exit=1 failed"));
    }

    #[test]
    fn summary_drops_oldest_records_first() {
        let mut state = TaskState::new();
        state.merge_code_locations(vec![loc("a.py", "C.m", 3, 5)]);
        for i in 0..50 {
            let mut rec = record(vec![], &[&format!("tests/t{i:02}.py")], i % 2);
            rec.failure_summary = format!("record-{i:02}");
            state.record_execution(rec).unwrap();
        }
        let full = state.render_summary(usize::MAX);
        assert!(full.contains(ELIDED_RECORDS_MARKER));
        assert!(full.contains("record-49") && !full.contains("record-39"));

        let budget = full.chars().count() - 60;
        let small = state.render_summary(budget);
        assert!(small.chars().count() <= budget);
        assert!(small.contains(ELIDED_RECORDS_MARKER));
        assert!(small.contains("tests/t49.py"));
        assert!(!small.contains("tests/t40.py"));
        // Excerpts survive while records can still be dropped.
        assert!(small.contains("    | def x():"));
    }

    #[test]
    fn summary_drops_excerpts_after_records() {
        let mut state = TaskState::new();
        state.merge_code_locations(vec![loc("a.py", "C.m", 3, 5)]);
        state.record_execution(record(vec![], &["t.py"], 0)).unwrap();
        let no_excerpt_len = state.render_with(0, false).chars().count();
        let out = state.render_summary(no_excerpt_len);
        assert!(!out.contains("    | def x():"));
        assert!(!out.contains("t.py"));
        assert!(state.render_summary(10).chars().count() <= 10);
    }

    #[test]
    fn touched_fields_detects_changes() {
        let before = TaskState::new();
        let mut after = before.clone();
        after.merge_code_locations(vec![loc("a.py", "f", 1, 2)]);
        assert_eq!(after.touched_fields(&before), BTreeSet::from([StateField::CodeLocations]));
    }

    #[test]
    fn state_serializes_with_stable_field_names() {
        let mut state = TaskState::new();
        state.merge_code_locations(vec![loc("a.py", "f", 1, 2)]);
        let json = serde_json::to_value(&state).unwrap();
        for field in ["code_locations", "test_locations", "exec_records", "diff_store", "reproducer"] {
            assert!(json.get(field).is_some(), "missing {field}");
        }
        let back: TaskState = serde_json::from_value(json).unwrap();
        assert_eq!(back, state);
    }
}

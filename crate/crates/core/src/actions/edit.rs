//! EditCode: a replacement sub-agent working on top of selected base diffs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{expand, truncate, ActionEnv, ActionError, ActionName, ActionOutput, Artifact, REPRODUCER_PATH};
use crate::diff::{self, Patch};
use crate::index::{is_test_path, parse_python};
use crate::llm::{ChatMessage, FieldSpec, FieldType, LlmError, Schema};
use crate::state::{DiffDraft, DiffId, DiffKind, LineSpan, TaskState};

const FULL_VIEW_MAX_LINES: usize = 300;
const REGION_MARGIN: usize = 20;
const SYNTAX_CHECK: &str = "python3 -c 'import ast,sys; ast.parse(open(sys.argv[1]).read(), sys.argv[1])'";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocationTarget {
    Unit(String),
    /// Inclusive 1-based lines.
    Lines(usize, usize),
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationRef {
    pub file: String,
    pub target: LocationTarget,
}

/// Parses `file::Qualified.name`, `file:start-end`, `file:line` or `file`.
pub fn parse_location_ref(text: &str) -> Result<LocationRef, String> {
    let text = text.trim();
    let (file, target) = if let Some((file, q)) = text.split_once("::") {
        (file, LocationTarget::Unit(q.trim().to_string()))
    } else if let Some((file, range)) = text.rsplit_once(':').filter(|(_, r)| r.chars().all(|c| c.is_ascii_digit() || c == '-') && !r.is_empty()) {
        let (a, b) = range.split_once('-').unwrap_or((range, range));
        let (a, b): (usize, usize) = match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) if a >= 1 && a <= b => (a, b),
            _ => return Err(format!("bad line range in `{text}`")),
        };
        (file, LocationTarget::Lines(a, b))
    } else {
        (text, LocationTarget::File)
    };
    diff::validate_relative_path(file).map_err(|e| format!("bad location `{text}`: {e}"))?;
    if matches!(&target, LocationTarget::Unit(q) if q.is_empty()) {
        return Err(format!("empty unit name in `{text}`"));
    }
    Ok(LocationRef {
        file: file.to_string(),
        target,
    })
}

fn leading_ws(line: &str) -> &str {
    &line[..line.len() - line.trim_start().len()]
}

/// Replaces the single occurrence of `original`; falls back to matching
/// lines with surrounding whitespace ignored, re-indenting `patched`.
pub(super) fn replace_once(text: &str, original: &str, patched: &str) -> Result<String, String> {
    match text.matches(original).count() {
        1 => return Ok(text.replacen(original, patched, 1)),
        0 => {}
        n => return Err(format!("`original` occurs {n} times; quote more context so it is unique")),
    }
    let orig: Vec<&str> = original.lines().collect();
    let first = orig.iter().position(|l| !l.trim().is_empty());
    let last = orig.iter().rposition(|l| !l.trim().is_empty());
    let (Some(first), Some(last)) = (first, last) else {
        return Err("`original` is blank".into());
    };
    let orig = &orig[first..=last];
    let lines: Vec<&str> = text.lines().collect();
    let matches: Vec<usize> = (0..lines.len().saturating_sub(orig.len() - 1))
        .filter(|&i| orig.iter().enumerate().all(|(k, o)| lines[i + k].trim() == o.trim()))
        .collect();
    let start = match matches.as_slice() {
        [one] => *one,
        [] => return Err("`original` does not match the file; quote the existing code exactly".into()),
        many => {
            return Err(format!(
                "`original` matches {} places (ignoring whitespace); quote more context",
                many.len()
            ))
        }
    };
    let orig_indent = leading_ws(orig[0]);
    let file_indent = leading_ws(lines[start]);
    let mut out: Vec<String> = lines[..start].iter().map(|l| l.to_string()).collect();
    for p in patched.lines() {
        if p.trim().is_empty() {
            out.push(String::new());
        } else if let Some(rest) = p.strip_prefix(orig_indent) {
            out.push(format!("{file_indent}{rest}"));
        } else {
            out.push(format!("{file_indent}{}", p.trim_start()));
        }
    }
    out.extend(lines[start + orig.len()..].iter().map(|l| l.to_string()));
    let mut joined = out.join("\n");
    if text.ends_with('\n') {
        joined.push('\n');
    }
    Ok(joined)
}

fn numbered(text: &str, span: LineSpan) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if span.contains(n) {
            let _ = writeln!(out, "{n:>5} | {line}");
        }
    }
    out
}

/// Incremental result of a successful edit.
pub(super) struct EditResult {
    pub patch: Patch,
}

impl EditResult {
    pub fn kind(&self) -> DiffKind {
        let paths = self.patch.touched_paths();
        if !paths.is_empty() && paths.iter().all(|p| is_test_path(p) || p == REPRODUCER_PATH) {
            DiffKind::Test
        } else {
            DiffKind::Code
        }
    }
}

/// Applies `base` (ancestors included), asks the sub-agent for a
/// replacement at `location`, and snapshots the incremental diff. The
/// inner `Err` is a soft failure with diagnostics.
pub(super) fn perform_edit(
    env: &ActionEnv,
    label: ActionName,
    state: &TaskState,
    base: &[DiffId],
    location: &str,
    instruction: &str,
    extra_context: &str,
) -> Result<Result<EditResult, String>, ActionError> {
    let loc = parse_location_ref(location).map_err(ActionError::InvalidArgument)?;
    env.apply_selection(state, base)?;
    let before = env.ws.text_tree()?;
    let current = before.get(&loc.file).cloned();
    let line_total = current.as_deref().map(|t| t.lines().count()).unwrap_or(0);

    let focus = match (&loc.target, current.as_deref()) {
        (LocationTarget::Unit(q), Some(text)) => {
            let units = parse_python(text).unwrap_or_default();
            let unit = units
                .iter()
                .find(|u| &u.qualified_name == q)
                .ok_or_else(|| ActionError::InvalidArgument(format!("`{q}` is not defined in {}", loc.file)))?;
            Some(unit.span)
        }
        (LocationTarget::Unit(q), None) => {
            return Err(ActionError::InvalidArgument(format!(
                "{} does not exist, so `{q}` cannot be located",
                loc.file
            )))
        }
        (LocationTarget::Lines(a, b), Some(_)) => {
            if *a > line_total.max(1) {
                return Err(ActionError::InvalidArgument(format!(
                    "{} has only {line_total} lines",
                    loc.file
                )));
            }
            Some(LineSpan {
                start: *a,
                end: (*b).min(line_total.max(1)),
            })
        }
        (LocationTarget::Lines(..), None) => {
            return Err(ActionError::InvalidArgument(format!("{} does not exist", loc.file)))
        }
        (LocationTarget::File, _) => None,
    };

    let mut prompt = format!(
        "You are editing code for a software engineering task.\n\nTask:\n{}\n\nRequested behavior change:\n{instruction}\n\n",
        env.task_description
    );
    if !extra_context.is_empty() {
        let _ = writeln!(prompt, "{extra_context}\n");
    }
    if !state.code_locations.is_empty() || !state.test_locations.is_empty() {
        prompt.push_str("Known relevant locations:\n");
        for l in &state.code_locations {
            let _ = writeln!(prompt, "- {}:{} {}", l.file, l.line_span, l.qualified_name);
        }
        for t in &state.test_locations {
            let _ = writeln!(prompt, "- (test) {}:{} {}", t.location.file, t.location.line_span, t.location.qualified_name);
        }
        prompt.push('\n');
    }
    match current.as_deref() {
        None => {
            let _ = writeln!(prompt, "File {} does not exist yet; leave `original` empty to create it.", loc.file);
        }
        Some(text) => {
            let view = if line_total <= FULL_VIEW_MAX_LINES {
                LineSpan {
                    start: 1,
                    end: line_total.max(1),
                }
            } else {
                let f = focus.unwrap_or(LineSpan { start: 1, end: 1 });
                LineSpan {
                    start: f.start.saturating_sub(REGION_MARGIN).max(1),
                    end: (f.end + REGION_MARGIN).min(line_total),
                }
            };
            let _ = writeln!(prompt, "File {} (lines {view}):", loc.file);
            prompt.push_str(&numbered(text, view));
            if let Some(f) = focus {
                let _ = writeln!(prompt, "\nThe edit location is lines {f}.");
            }
        }
    }
    let schema = Schema::Object(vec![
        FieldSpec::optional("file", FieldType::String, "file to edit; defaults to the location's file"),
        FieldSpec::required(
            "original",
            FieldType::String,
            "existing code to replace, quoted exactly (empty only when creating a new file)",
        ),
        FieldSpec::required("patched", FieldType::String, "replacement code"),
    ]);
    prompt.push('\n');
    prompt.push_str(&schema.describe());

    let mut messages = vec![ChatMessage::user(prompt)];
    let mut diagnostics = Vec::new();
    for attempt in 1..=env.limits.edit_attempts {
        let value = match env.gateway.select_structured(label.as_str(), &messages, &schema) {
            Ok(v) => v,
            Err(LlmError::Decision(e)) => return Ok(Err(format!("edit sub-agent gave no usable reply: {e}"))),
            Err(e) => return Err(e.into()),
        };
        let file = value["file"].as_str().unwrap_or(&loc.file).trim().to_string();
        let original = value["original"].as_str().unwrap_or_default();
        let patched = value["patched"].as_str().unwrap_or_default();
        let outcome = try_edit(env, &file, original, patched);
        let problem = match outcome {
            Ok(()) => {
                let after = env.ws.text_tree()?;
                let patch = diff::diff_trees(&before, &after);
                if !patch.is_empty() {
                    return Ok(Ok(EditResult { patch }));
                }
                "the edit produced no change".to_string()
            }
            Err(p) => p,
        };
        diagnostics.push(format!("attempt {attempt}: {problem}"));
        // Undo this attempt before retrying.
        env.apply_selection(state, base)?;
        messages.push(ChatMessage::assistant(crate::llm::fenced_json(&value)));
        messages.push(ChatMessage::user(format!(
            "The edit was rejected: {problem}\nReply again.\n{}",
            schema.describe()
        )));
    }
    Ok(Err(format!(
        "no valid edit after {} attempts:\n{}",
        env.limits.edit_attempts,
        diagnostics.join("\n")
    )))
}

fn try_edit(env: &ActionEnv, file: &str, original: &str, patched: &str) -> Result<(), String> {
    diff::validate_relative_path(file).map_err(|e| format!("bad file `{file}`: {e}"))?;
    let existing = if env.ws.exists(file) {
        Some(env.ws.read_file(file, None).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let updated = match (&existing, original.trim().is_empty()) {
        (None, true) => {
            let mut body = patched.to_string();
            if !body.is_empty() && !body.ends_with('\n') {
                body.push('\n');
            }
            body
        }
        (None, false) => return Err(format!("{file} does not exist; leave `original` empty to create it")),
        (Some(_), true) => return Err(format!("{file} exists; quote the code to replace in `original`")),
        (Some(text), false) => replace_once(text, original, patched)?,
    };
    env.ws.write_file(file, &updated).map_err(|e| e.to_string())?;
    if file.ends_with(".py") {
        let quoted = shlex::try_quote(file).map_err(|e| e.to_string())?;
        let check = env
            .ws
            .run_command(&format!("{SYNTAX_CHECK} {quoted}"), None)
            .map_err(|e| e.to_string())?;
        if !check.success() {
            let detail: Vec<&str> = check.stderr.lines().rev().take(4).collect();
            let detail: Vec<&str> = detail.into_iter().rev().collect();
            return Err(format!("syntax check failed:\n{}", detail.join("\n")));
        }
    }
    Ok(())
}

pub(super) fn edit_code(
    env: &ActionEnv,
    state: &mut TaskState,
    delta_behavior: &str,
    location: &str,
    base_diffs: &[DiffId],
) -> Result<ActionOutput, ActionError> {
    let mut parents: Vec<DiffId> = Vec::new();
    for id in base_diffs {
        if !parents.contains(id) {
            parents.push(id.clone());
        }
    }
    let base = expand(state, &parents)?;
    match perform_edit(env, ActionName::EditCode, state, &base, location, delta_behavior, "")? {
        Ok(result) => {
            let kind = result.kind();
            let text = result.patch.render();
            let first_line = delta_behavior.lines().next().unwrap_or_default();
            let id = state.add_diff(DiffDraft {
                kind,
                text: text.clone(),
                origin: ActionName::EditCode.to_string(),
                parents,
                summary: format!("{} @ {}", truncate(first_line, 100), location.trim()),
            })?;
            Ok(ActionOutput {
                narrative: format!(
                    "Stored {id} ({kind} diff) on top of {:?}:\n{}",
                    base.iter().map(DiffId::as_str).collect::<Vec<_>>(),
                    truncate(&text, 3000)
                ),
                artifacts: vec![Artifact::Diff(id)],
                success_hint: true,
                ..Default::default()
            })
        }
        Err(msg) => Ok(ActionOutput::new(msg, false)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn location_refs() {
        assert_eq!(
            parse_location_ref("pkg/m.py::C.f").unwrap(),
            LocationRef {
                file: "pkg/m.py".into(),
                target: LocationTarget::Unit("C.f".into())
            }
        );
        assert_eq!(parse_location_ref("pkg/m.py:3-9").unwrap().target, LocationTarget::Lines(3, 9));
        assert_eq!(parse_location_ref("pkg/m.py:4").unwrap().target, LocationTarget::Lines(4, 4));
        assert_eq!(parse_location_ref("pkg/m.py").unwrap().target, LocationTarget::File);
        assert!(parse_location_ref("../x.py").is_err());
        assert!(parse_location_ref("m.py:9-3").is_err());
        assert!(parse_location_ref("m.py::").is_err());
    }

    #[test]
    fn exact_replacement() {
        let text = "def f():\n    return 1\n";
        assert_eq!(replace_once(text, "return 1", "return 2").unwrap(), "def f():\n    return 2\n");
        assert!(replace_once("a\na\n", "a", "b").is_err());
        assert!(replace_once(text, "return 3", "x").is_err());
    }

    #[test]
    fn whitespace_tolerant_replacement_reindents() {
        let text = "class C:\n    def f(self):\n        if x:\n            return 1\n        return 0\n";
        let out = replace_once(text, "if x:\n    return 1", "if x and y:\n    return 1\nif z:\n    return 2").unwrap();
        assert_eq!(
            out,
            "class C:\n    def f(self):\n        if x and y:\n            return 1\n        if z:\n            return 2\n        return 0\n"
        );
    }
}

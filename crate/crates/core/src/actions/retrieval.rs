//! CodeRetrieval and TestRetrieval: a search-tool sub-agent over the index.

use std::fmt::Write as _;

use serde_json::Value;

use super::edit::{parse_location_ref, LocationTarget};
use super::{ActionEnv, ActionError, ActionName, ActionOutput};
use crate::index::SearchResult;
use crate::llm::{fenced_json, ChatMessage, FieldSpec, FieldType, LlmError, Schema, Variant};
use crate::state::{CodeLocation, LineSpan, TaskState, TestLocation, UnitKind};

const RESULT_EXCERPT_LINES: usize = 12;

fn tool_schema() -> Schema {
    let s = |name: &str, desc: &str| FieldSpec::required(name, FieldType::String, desc);
    Schema::Tagged {
        tag: "tool".into(),
        variants: vec![
            Variant {
                name: "search_class".into(),
                description: "find classes by name".into(),
                fields: vec![s("name", "class name")],
            },
            Variant {
                name: "search_func".into(),
                description: "find functions and methods by name".into(),
                fields: vec![s("name", "function or method name")],
            },
            Variant {
                name: "search_method_in_class".into(),
                description: "find a method defined in a class".into(),
                fields: vec![s("class_name", "class name"), s("method_name", "method name")],
            },
            Variant {
                name: "search_snippet".into(),
                description: "find code containing a literal string".into(),
                fields: vec![s("text", "literal text")],
            },
            Variant {
                name: "finish".into(),
                description: "stop searching and select the relevant locations".into(),
                fields: vec![FieldSpec::optional(
                    "locations",
                    FieldType::StringList,
                    "references from the results, e.g. `pkg/mod.py::Class.method` or `pkg/mod.py:10-20`",
                )],
            },
        ],
    }
}

/// Reference the sub-agent can quote back.
pub(super) fn location_ref(loc: &CodeLocation) -> String {
    match loc.unit_kind {
        UnitKind::Snippet => format!("{}:{}", loc.file, loc.line_span),
        _ => format!("{}::{}", loc.file, loc.qualified_name),
    }
}

fn render_results(result: &SearchResult) -> String {
    let mut out = String::new();
    if result.locations.is_empty() {
        out.push_str("No results.\n");
    }
    for loc in &result.locations {
        let _ = writeln!(out, "* {} [{} lines {}]", location_ref(loc), loc.unit_kind, loc.line_span);
        for line in loc.excerpt.lines().take(RESULT_EXCERPT_LINES) {
            let _ = writeln!(out, "    | {line}");
        }
    }
    if result.truncated {
        out.push_str("(more results exist; refine the query)\n");
    }
    if let Some(note) = &result.note {
        let _ = writeln!(out, "Note: {note}");
    }
    out
}

struct SearchOutcome {
    selected: Vec<CodeLocation>,
    notes: Vec<String>,
    calls: usize,
}

fn run_search_agent(
    env: &ActionEnv,
    label: ActionName,
    intro: String,
    tests_only: bool,
) -> Result<Result<SearchOutcome, String>, ActionError> {
    let schema = tool_schema();
    let mut messages = vec![ChatMessage::user(format!("{intro}\n{}", schema.describe()))];
    let mut seen: Vec<CodeLocation> = Vec::new();
    let mut notes = Vec::new();
    let in_scope = |loc: &CodeLocation| !tests_only || env.index.file(&loc.file).is_some_and(|f| f.is_test);

    for call in 1..=env.limits.retrieval_rounds {
        let value = match env.gateway.select_structured(label.as_str(), &messages, &schema) {
            Ok(v) => v,
            Err(LlmError::Decision(e)) => return Ok(Err(format!("search sub-agent gave no usable reply: {e}"))),
            Err(e) => return Err(e.into()),
        };
        let arg = |k: &str| value[k].as_str().unwrap_or_default().to_string();
        let mut result = match value["tool"].as_str().unwrap_or_default() {
            "search_class" => env.index.search_class(&arg("name")),
            "search_func" => env.index.search_func(&arg("name")),
            "search_method_in_class" => env.index.search_method_in_class(&arg("class_name"), &arg("method_name")),
            "search_snippet" => env.index.search_snippet(&arg("text")),
            _ => {
                let refs: Vec<String> = value["locations"]
                    .as_array()
                    .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                    .unwrap_or_default();
                let mut selected = Vec::new();
                for r in refs {
                    match resolve_ref(env, &seen, &r) {
                        Some(loc) if in_scope(&loc) => {
                            if !selected.contains(&loc) {
                                selected.push(loc);
                            }
                        }
                        Some(_) => notes.push(format!("`{r}` is not in a test file; skipped")),
                        None => notes.push(format!("`{r}` does not resolve; skipped")),
                    }
                }
                return Ok(Ok(SearchOutcome {
                    selected,
                    notes,
                    calls: call,
                }));
            }
        };
        result.locations.retain(|l| in_scope(l));
        for loc in &result.locations {
            if !seen.contains(loc) {
                seen.push(loc.clone());
            }
        }
        messages.push(ChatMessage::assistant(fenced_json(&value)));
        messages.push(ChatMessage::user(format!(
            "{}\nCall another tool, or `finish` with the relevant locations.",
            render_results(&result)
        )));
    }
    notes.push(format!(
        "search budget of {} tool calls exhausted; keeping every location seen",
        env.limits.retrieval_rounds
    ));
    Ok(Ok(SearchOutcome {
        selected: seen,
        notes,
        calls: env.limits.retrieval_rounds,
    }))
}

fn resolve_ref(env: &ActionEnv, seen: &[CodeLocation], reference: &str) -> Option<CodeLocation> {
    let r = parse_location_ref(reference).ok()?;
    match &r.target {
        LocationTarget::Unit(q) => seen
            .iter()
            .find(|l| l.file == r.file && &l.qualified_name == q)
            .cloned()
            .or_else(|| env.index.locate(&r.file, Some(q))),
        LocationTarget::Lines(start, end) => {
            if let Some(l) = seen.iter().find(|l| l.file == r.file && l.line_span == LineSpan { start: *start, end: *end }) {
                return Some(l.clone());
            }
            let entry = env.index.file(&r.file)?;
            let span = LineSpan::new(*start, (*end).min(entry.line_count().max(1))).ok()?;
            CodeLocation::new(r.file.clone(), UnitKind::Snippet, format!("{}:{span}", r.file), span, &entry.text_of(span)).ok()
        }
        LocationTarget::File => env.index.locate(&r.file, None),
    }
}

fn narrative(kind: &str, added: &[String], known: usize, notes: &[String], calls: usize) -> String {
    let mut out = if added.is_empty() && known == 0 {
        format!("No matching {kind} found ({calls} tool calls).")
    } else {
        format!(
            "Added {} {kind} ({} already known, {calls} tool calls){}",
            added.len(),
            known,
            if added.is_empty() { "." } else { ":" }
        )
    };
    for a in added {
        let _ = write!(out, "\n- {a}");
    }
    for n in notes {
        let _ = write!(out, "\nNote: {n}");
    }
    out
}

pub(super) fn code_retrieval(env: &ActionEnv, state: &mut TaskState, instruction: &str) -> Result<ActionOutput, ActionError> {
    let intro = format!(
        "You are locating program code for a software engineering task.\n\nTask:\n{}\n\nInstruction:\n{instruction}\n\n\
         Use the search tools to find the relevant classes, functions, methods or snippets, then finish with the locations that matter.",
        env.task_description
    );
    let outcome = match run_search_agent(env, ActionName::CodeRetrieval, intro, false)? {
        Ok(o) => o,
        Err(msg) => return Ok(ActionOutput::new(msg, false)),
    };
    let before = state.code_locations.len();
    let selected = outcome.selected.len();
    state.merge_code_locations(outcome.selected);
    let added: Vec<String> = state.code_locations[before..].iter().map(location_ref).collect();
    let known = selected - added.len();
    Ok(ActionOutput::new(
        narrative("code locations", &added, known, &outcome.notes, outcome.calls),
        selected > 0,
    ))
}

fn to_test_locations(env: &ActionEnv, loc: CodeLocation) -> Vec<TestLocation> {
    let hint = env.index.file(&loc.file).and_then(|f| f.framework_hint.clone());
    if loc.unit_kind != UnitKind::Class {
        return TestLocation::new(loc, hint).into_iter().collect();
    }
    let Some(entry) = env.index.file(&loc.file) else {
        return Vec::new();
    };
    entry
        .units
        .iter()
        .filter(|u| u.kind == UnitKind::Method && u.class.as_deref() == Some(loc.qualified_name.as_str()))
        .filter(|u| u.name.starts_with("test"))
        .filter_map(|u| env.index.locate(&loc.file, Some(&u.qualified_name)))
        .filter_map(|l| TestLocation::new(l, hint.clone()).ok())
        .collect()
}

pub(super) fn test_retrieval(env: &ActionEnv, state: &mut TaskState, instruction: &str) -> Result<ActionOutput, ActionError> {
    let test_files = env.index.classify_test_files();
    if test_files.is_empty() {
        return Ok(ActionOutput::new(
            "The project has no test files; no test locations collected.",
            false,
        ));
    }
    let mut intro = format!(
        "You are locating existing tests for a software engineering task.\n\nTask:\n{}\n\nInstruction:\n{instruction}\n\nTest files:\n",
        env.task_description
    );
    for f in &test_files {
        let _ = writeln!(intro, "- {f}");
    }
    if !state.code_locations.is_empty() {
        intro.push_str("\nRelevant program code already found:\n");
        for l in &state.code_locations {
            let _ = writeln!(intro, "- {}", location_ref(l));
        }
    }
    intro.push_str("\nSearch results are limited to test files. Finish with the tests that exercise the relevant code.");
    let outcome = match run_search_agent(env, ActionName::TestRetrieval, intro, true)? {
        Ok(o) => o,
        Err(msg) => return Ok(ActionOutput::new(msg, false)),
    };
    let tests: Vec<TestLocation> = outcome
        .selected
        .into_iter()
        .flat_map(|l| to_test_locations(env, l))
        .collect();
    let before = state.test_locations.len();
    let selected = tests.len();
    state.merge_test_locations(tests);
    let added: Vec<String> = state.test_locations[before..]
        .iter()
        .map(|t| location_ref(&t.location))
        .collect();
    let known = selected - added.len();
    Ok(ActionOutput::new(
        narrative("test locations", &added, known, &outcome.notes, outcome.calls),
        selected > 0,
    ))
}

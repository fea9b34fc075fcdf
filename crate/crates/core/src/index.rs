//! Syntactic code index and the structure-aware search tools built on it.
//!
//! Python sources are split into classes, methods and functions by a
//! lightweight line scanner (strings, comments, brackets, indentation).
//! Files the scanner rejects, and files in other languages, are kept as
//! whole-file snippets so textual search still reaches them.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::state::{CodeLocation, LineSpan, TestLocation, UnitKind};
use crate::workspace::{Fingerprint, Workspace, WorkspaceError};

pub const DEFAULT_RESULT_LIMIT: usize = 10;
const SNIPPET_CONTEXT: usize = 3;
const TEST_DIR_NAMES: &[&str] = &["test", "tests", "testing"];
const TEST_WORDS: &[&str] = &["test", "tests"];

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index built on {built:?} but the workspace is now {current:?}; rebuild the index")]
    Stale { built: Fingerprint, current: Fingerprint },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unit {
    pub kind: UnitKind,
    /// Last path segment, e.g. `m` for `C.m`.
    pub name: String,
    pub qualified_name: String,
    pub span: LineSpan,
    /// Qualified name of the class a method belongs to.
    pub class: Option<String>,
    pub depth: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub units: Vec<Unit>,
    /// True when the file was split into syntactic units.
    pub parsed: bool,
    pub is_test: bool,
    pub framework_hint: Option<String>,
    #[serde(skip)]
    lines: Vec<String>,
}

impl FileEntry {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn text_of(&self, span: LineSpan) -> String {
        let end = span.end.min(self.lines.len());
        if span.start > end {
            return String::new();
        }
        self.lines[span.start - 1..end].join("\n")
    }

    /// Innermost class/function/method containing `line`.
    pub fn enclosing_unit(&self, line: usize) -> Option<&Unit> {
        self.units
            .iter()
            .filter(|u| u.kind != UnitKind::Snippet && u.span.contains(line))
            .max_by_key(|u| u.depth)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SearchResult {
    pub locations: Vec<CodeLocation>,
    /// More matches existed than the result limit.
    pub truncated: bool,
    pub note: Option<String>,
}

impl SearchResult {
    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Immutable after build; safe to share across threads.
#[derive(Debug, Clone)]
pub struct CodeIndex {
    files: BTreeMap<String, FileEntry>,
    fingerprint: Fingerprint,
    limit: usize,
}

/// How closely a name matched a query; lower is better.
fn match_tier(candidate: &str, query: &str) -> Option<u8> {
    if candidate == query {
        Some(0)
    } else if candidate.eq_ignore_ascii_case(query) {
        Some(1)
    } else if candidate.to_lowercase().contains(&query.to_lowercase()) {
        Some(2)
    } else {
        None
    }
}

fn unit_tier(unit_name: &str, qualified: &str, query: &str) -> Option<u8> {
    match (match_tier(unit_name, query), match_tier(qualified, query)) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

impl CodeIndex {
    pub fn build(ws: &Workspace) -> Result<Self, IndexError> {
        let tree = ws.text_tree()?;
        let fingerprint = ws.fingerprint()?;
        let files = tree
            .iter()
            .map(|(path, text)| (path.clone(), index_file(path, text)))
            .collect();
        Ok(Self {
            files,
            fingerprint,
            limit: DEFAULT_RESULT_LIMIT,
        })
    }

    pub fn with_limit(mut self, limit: usize) -> Self {
        self.limit = limit.max(1);
        self
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// Staleness guard: fails unless the workspace still has the tree the
    /// index was built from.
    pub fn ensure_fresh(&self, ws: &Workspace) -> Result<(), IndexError> {
        let current = ws.fingerprint()?;
        if current != self.fingerprint {
            return Err(IndexError::Stale {
                built: self.fingerprint.clone(),
                current,
            });
        }
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = &FileEntry> {
        self.files.values()
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.get(path)
    }

    pub fn unit_count(&self) -> usize {
        self.files.values().map(|f| f.units.len()).sum()
    }

    fn location(&self, file: &FileEntry, unit: &Unit) -> CodeLocation {
        CodeLocation::new(
            file.path.clone(),
            unit.kind,
            unit.qualified_name.clone(),
            unit.span,
            &file.text_of(unit.span),
        )
        .expect("indexed paths are workspace-relative")
    }

    fn finish(&self, mut hits: Vec<((u8, u8), &FileEntry, &Unit)>) -> SearchResult {
        hits.sort_by(|a, b| {
            (a.0, &a.1.path, a.2.span.start, &a.2.qualified_name).cmp(&(b.0, &b.1.path, b.2.span.start, &b.2.qualified_name))
        });
        let truncated = hits.len() > self.limit;
        SearchResult {
            locations: hits
                .into_iter()
                .take(self.limit)
                .map(|(_, f, u)| self.location(f, u))
                .collect(),
            truncated,
            note: None,
        }
    }

    fn units_of_kind<'a>(&'a self, kinds: &'a [UnitKind]) -> impl Iterator<Item = (&'a FileEntry, &'a Unit)> + 'a {
        self.files
            .values()
            .flat_map(|f| f.units.iter().map(move |u| (f, u)))
            .filter(move |(_, u)| kinds.contains(&u.kind))
    }

    pub fn search_class(&self, name: &str) -> SearchResult {
        let name = name.trim();
        if name.is_empty() {
            return SearchResult::default();
        }
        let hits = self
            .units_of_kind(&[UnitKind::Class])
            .filter_map(|(f, u)| unit_tier(&u.name, &u.qualified_name, name).map(|t| ((t, 0), f, u)))
            .collect();
        self.finish(hits)
    }

    /// Functions (top-level and nested) and methods.
    pub fn search_func(&self, name: &str) -> SearchResult {
        let name = name.trim();
        if name.is_empty() {
            return SearchResult::default();
        }
        let hits = self
            .units_of_kind(&[UnitKind::Function, UnitKind::Method])
            .filter_map(|(f, u)| unit_tier(&u.name, &u.qualified_name, name).map(|t| ((t, 0), f, u)))
            .collect();
        self.finish(hits)
    }

    /// Methods defined directly in classes matching `class_name`. Inherited
    /// members are not resolved.
    pub fn search_method_in_class(&self, class_name: &str, method_name: &str) -> SearchResult {
        let (class_name, method_name) = (class_name.trim(), method_name.trim());
        if class_name.is_empty() || method_name.is_empty() {
            return SearchResult::default();
        }
        let classes: Vec<(&FileEntry, &Unit, u8)> = self
            .units_of_kind(&[UnitKind::Class])
            .filter_map(|(f, u)| unit_tier(&u.name, &u.qualified_name, class_name).map(|t| (f, u, t)))
            .collect();
        let mut hits = Vec::new();
        for (f, class, class_tier) in &classes {
            for unit in f.units.iter().filter(|u| {
                u.kind == UnitKind::Method && u.class.as_deref() == Some(class.qualified_name.as_str())
            }) {
                if let Some(t) = match_tier(&unit.name, method_name) {
                    hits.push(((*class_tier, t), *f, unit));
                }
            }
        }
        let mut result = self.finish(hits);
        if result.is_empty() && !classes.is_empty() {
            result.note = Some(format!(
                "class `{class_name}` found but defines no method `{method_name}`; inherited members are not resolved"
            ));
        }
        result
    }

    /// Textual search; each match maps to its innermost enclosing unit, or
    /// to a small snippet window when it lies outside any unit.
    pub fn search_snippet(&self, literal: &str) -> SearchResult {
        if literal.is_empty() {
            return SearchResult::default();
        }
        let mut locations: Vec<CodeLocation> = Vec::new();
        let mut truncated = false;
        for file in self.files.values() {
            let mut last_window_end = 0;
            for (i, line) in file.lines.iter().enumerate() {
                let lineno = i + 1;
                if !line.contains(literal) {
                    continue;
                }
                let loc = match file.enclosing_unit(lineno) {
                    Some(unit) => self.location(file, unit),
                    None => {
                        if lineno <= last_window_end {
                            continue;
                        }
                        let start = lineno.saturating_sub(SNIPPET_CONTEXT).max(1);
                        let end = (lineno + SNIPPET_CONTEXT).min(file.lines.len());
                        last_window_end = end;
                        let span = LineSpan { start, end };
                        CodeLocation::new(
                            file.path.clone(),
                            UnitKind::Snippet,
                            format!("{}:{}", file.path, span),
                            span,
                            &file.text_of(span),
                        )
                        .expect("indexed paths are workspace-relative")
                    }
                };
                if locations.iter().any(|l| l.file == loc.file && l.line_span == loc.line_span) {
                    continue;
                }
                if locations.len() == self.limit {
                    truncated = true;
                    break;
                }
                locations.push(loc);
            }
            if truncated {
                break;
            }
        }
        SearchResult {
            locations,
            truncated,
            note: None,
        }
    }

    pub fn classify_test_files(&self) -> Vec<String> {
        self.files.values().filter(|f| f.is_test).map(|f| f.path.clone()).collect()
    }

    /// Test functions and methods in test files, or a whole-file snippet for
    /// test files without parseable units.
    pub fn test_units(&self, file: &str) -> Vec<TestLocation> {
        let Some(entry) = self.files.get(file).filter(|f| f.is_test) else {
            return Vec::new();
        };
        let tests: Vec<&Unit> = entry
            .units
            .iter()
            .filter(|u| matches!(u.kind, UnitKind::Function | UnitKind::Method) && u.name.starts_with("test"))
            .collect();
        let chosen: Vec<&Unit> = if tests.is_empty() {
            entry.units.iter().filter(|u| u.kind == UnitKind::Snippet).collect()
        } else {
            tests
        };
        chosen
            .into_iter()
            .filter_map(|u| TestLocation::new(self.location(entry, u), entry.framework_hint.clone()).ok())
            .collect()
    }

    /// Location of a named unit, or of a whole file when `qualified_name`
    /// is `None`.
    pub fn locate(&self, file: &str, qualified_name: Option<&str>) -> Option<CodeLocation> {
        let entry = self.files.get(file)?;
        match qualified_name {
            Some(q) => entry
                .units
                .iter()
                .find(|u| u.qualified_name == q)
                .map(|u| self.location(entry, u)),
            None => {
                let span = LineSpan {
                    start: 1,
                    end: entry.lines.len().max(1),
                };
                CodeLocation::new(entry.path.clone(), UnitKind::Snippet, entry.path.clone(), span, &entry.text_of(span)).ok()
            }
        }
    }
}

fn whole_file_snippet(path: &str, line_count: usize) -> Unit {
    Unit {
        kind: UnitKind::Snippet,
        name: path.to_string(),
        qualified_name: path.to_string(),
        span: LineSpan {
            start: 1,
            end: line_count.max(1),
        },
        class: None,
        depth: 0,
    }
}

fn index_file(path: &str, text: &str) -> FileEntry {
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    let is_python = path.ends_with(".py");
    let (units, parsed) = match is_python.then(|| parse_python(text)) {
        Some(Ok(units)) => (units, true),
        _ => (vec![whole_file_snippet(path, lines.len())], false),
    };
    let imports = if is_python { framework_imports(text) } else { (false, false) };
    let is_test = is_test_path(path) || imports.0 || imports.1;
    let framework_hint = if !is_python || !is_test {
        None
    } else if imports.0 || file_stem(path) == "conftest" {
        Some("pytest".to_string())
    } else if imports.1 {
        Some("unittest".to_string())
    } else {
        Some("pytest".to_string())
    };
    FileEntry {
        path: path.to_string(),
        units,
        parsed,
        is_test,
        framework_hint,
        lines,
    }
}

fn file_stem(path: &str) -> &str {
    let name = path.rsplit('/').next().unwrap_or(path);
    match name.find('.') {
        Some(0) | None => name,
        Some(i) => &name[..i],
    }
}

fn stem_words(stem: &str) -> Vec<String> {
    let mut words = Vec::new();
    for part in stem.split(['_', '-', '.']) {
        let mut current = String::new();
        let chars: Vec<char> = part.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            let boundary = c.is_uppercase()
                && i > 0
                && (chars[i - 1].is_lowercase() || chars.get(i + 1).is_some_and(|n| n.is_lowercase()) && chars[i - 1].is_uppercase());
            if boundary && !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            current.push(c);
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words.into_iter().map(|w| w.to_lowercase()).collect()
}

/// Path-only half of the test-file heuristic.
pub fn is_test_path(path: &str) -> bool {
    let segments: Vec<&str> = path.split('/').collect();
    let dirs = &segments[..segments.len().saturating_sub(1)];
    if dirs.iter().any(|d| TEST_DIR_NAMES.contains(&d.to_lowercase().as_str())) {
        return true;
    }
    let stem = file_stem(path);
    if stem == "conftest" {
        return true;
    }
    let words = stem_words(stem);
    match (words.first(), words.last()) {
        (Some(first), Some(last)) => TEST_WORDS.contains(&first.as_str()) || TEST_WORDS.contains(&last.as_str()),
        _ => false,
    }
}

/// (imports pytest, imports unittest)
fn framework_imports(text: &str) -> (bool, bool) {
    let mut found = (false, false);
    for line in text.lines() {
        let l = line.trim_start();
        let module = if let Some(rest) = l.strip_prefix("import ") {
            rest
        } else if let Some(rest) = l.strip_prefix("from ") {
            rest
        } else {
            continue;
        };
        for part in module.split(',') {
            let root = part.trim().split(['.', ' ']).next().unwrap_or("");
            match root {
                "pytest" => found.0 = true,
                "unittest" => found.1 = true,
                _ => {}
            }
        }
    }
    found
}

#[derive(Debug, PartialEq, Eq)]
pub struct PySyntaxError {
    pub line: usize,
    pub message: &'static str,
}

/// One logical line: physical lines joined by brackets, continuations or
/// multi-line strings.
struct Logical {
    first: usize,
    last: usize,
    indent: usize,
    /// Code with string contents and comments blanked.
    code: String,
}

fn indent_width(line: &str) -> usize {
    let mut width = 0;
    for c in line.chars() {
        match c {
            ' ' => width += 1,
            '\t' => width = (width / 8 + 1) * 8,
            '\x0c' => width = 0,
            _ => break,
        }
    }
    width
}

fn logical_lines(text: &str) -> Result<Vec<Logical>, PySyntaxError> {
    let mut out = Vec::new();
    let mut depth: Vec<char> = Vec::new();
    // Open string: (quote char, triple, line opened).
    let mut string: Option<(char, bool, usize)> = None;
    let mut current: Option<Logical> = None;
    let mut continued = false;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let in_progress = current.is_some();
        if !in_progress {
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            current = Some(Logical {
                first: lineno,
                last: lineno,
                indent: indent_width(line),
                code: String::new(),
            });
        }
        let logical = current.as_mut().expect("set above");
        logical.last = lineno;
        continued = false;

        let chars: Vec<char> = line.chars().collect();
        let mut j = 0;
        while j < chars.len() {
            let c = chars[j];
            if let Some((q, triple, _)) = string {
                if c == '\\' {
                    j += 2;
                    continue;
                }
                if c == q {
                    if !triple {
                        string = None;
                        logical.code.push(q);
                    } else if chars.get(j + 1) == Some(&q) && chars.get(j + 2) == Some(&q) {
                        string = None;
                        logical.code.push(q);
                        j += 3;
                        continue;
                    }
                }
                j += 1;
                continue;
            }
            match c {
                '#' => break,
                '\'' | '"' => {
                    let triple = chars.get(j + 1) == Some(&c) && chars.get(j + 2) == Some(&c);
                    string = Some((c, triple, lineno));
                    logical.code.push(c);
                    j += if triple { 3 } else { 1 };
                    continue;
                }
                '(' | '[' | '{' => depth.push(c),
                ')' | ']' | '}' => {
                    let expected = match c {
                        ')' => '(',
                        ']' => '[',
                        _ => '{',
                    };
                    if depth.pop() != Some(expected) {
                        return Err(PySyntaxError {
                            line: lineno,
                            message: "unmatched closing bracket",
                        });
                    }
                }
                '\\' if j == chars.len() - 1 => {
                    continued = true;
                    j += 1;
                    continue;
                }
                _ => {}
            }
            logical.code.push(c);
            j += 1;
        }
        if let Some((_, false, _)) = string {
            if !line.ends_with('\\') {
                return Err(PySyntaxError {
                    line: lineno,
                    message: "unterminated string literal",
                });
            }
        }
        logical.code.push(' ');
        if depth.is_empty() && string.is_none() && !continued {
            out.push(current.take().expect("in progress"));
        }
    }
    if let Some((_, _, opened)) = string {
        return Err(PySyntaxError {
            line: opened,
            message: "unterminated string literal",
        });
    }
    if let Some(logical) = current {
        return Err(PySyntaxError {
            line: logical.first,
            message: if continued { "unexpected end of file after continuation" } else { "unclosed bracket" },
        });
    }
    Ok(out)
}

fn header_keyword(code: &str) -> Option<(UnitKind, String)> {
    let code = code.trim_start();
    let (is_class, rest) = if let Some(rest) = code.strip_prefix("class") {
        (true, rest)
    } else if let Some(rest) = code.strip_prefix("async def") {
        (false, rest)
    } else if let Some(rest) = code.strip_prefix("def") {
        (false, rest)
    } else {
        return None;
    };
    if !rest.starts_with(|c: char| c.is_whitespace()) {
        return None;
    }
    let name: String = rest
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    if name.is_empty() {
        return None;
    }
    Some((if is_class { UnitKind::Class } else { UnitKind::Function }, name))
}

/// Whether the logical line has a colon outside brackets.
fn has_top_level_colon(code: &str) -> bool {
    let mut depth = 0i32;
    let mut in_str: Option<char> = None;
    for c in code.chars() {
        if let Some(q) = in_str {
            if c == q {
                in_str = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => in_str = Some(c),
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ':' if depth == 0 => return true,
            _ => {}
        }
    }
    false
}

struct Open {
    unit: usize,
    indent: usize,
}

/// Splits Python source into class / method / function units.
pub fn parse_python(text: &str) -> Result<Vec<Unit>, PySyntaxError> {
    let logical = logical_lines(text)?;
    let mut units: Vec<Unit> = Vec::new();
    let mut open: Vec<Open> = Vec::new();
    let mut indents: Vec<usize> = vec![0];
    let mut expect_block = false;
    let mut last_content_line = 0;
    let mut decorator_start: Option<(usize, usize)> = None;

    for l in &logical {
        let top = *indents.last().expect("never empty");
        if expect_block {
            if l.indent <= top {
                return Err(PySyntaxError {
                    line: l.first,
                    message: "expected an indented block",
                });
            }
            indents.push(l.indent);
        } else if l.indent > top {
            return Err(PySyntaxError {
                line: l.first,
                message: "unexpected indent",
            });
        } else if l.indent < top {
            while indents.last().is_some_and(|&i| i > l.indent) {
                indents.pop();
            }
            if indents.last() != Some(&l.indent) {
                return Err(PySyntaxError {
                    line: l.first,
                    message: "unindent does not match any outer indentation level",
                });
            }
        }
        while open.last().is_some_and(|o| o.indent >= l.indent) {
            let o = open.pop().expect("checked");
            units[o.unit].span.end = last_content_line;
        }

        let code = l.code.trim_end();
        expect_block = code.ends_with(':');

        if code.trim_start().starts_with('@') {
            if decorator_start.map(|(_, ind)| ind != l.indent).unwrap_or(true) {
                decorator_start = Some((l.first, l.indent));
            }
            last_content_line = l.last;
            continue;
        }
        let decorated_from = decorator_start.take().filter(|&(_, ind)| ind == l.indent).map(|(s, _)| s);

        if let Some((kind, name)) = header_keyword(code) {
            if !has_top_level_colon(code) {
                return Err(PySyntaxError {
                    line: l.first,
                    message: "definition header without ':'",
                });
            }
            let parent = open.last().map(|o| &units[o.unit]);
            let (kind, class, qualified_name) = match (kind, parent) {
                (UnitKind::Function, Some(p)) if p.kind == UnitKind::Class => {
                    (UnitKind::Method, Some(p.qualified_name.clone()), format!("{}.{name}", p.qualified_name))
                }
                (k, Some(p)) => (k, None, format!("{}.{name}", p.qualified_name)),
                (k, None) => (k, None, name.clone()),
            };
            units.push(Unit {
                kind,
                name,
                qualified_name,
                span: LineSpan {
                    start: decorated_from.unwrap_or(l.first),
                    end: l.last,
                },
                class,
                depth: open.len(),
            });
            if expect_block {
                open.push(Open {
                    unit: units.len() - 1,
                    indent: l.indent,
                });
            }
        }
        last_content_line = l.last;
    }
    if expect_block {
        return Err(PySyntaxError {
            line: logical.last().map(|l| l.last).unwrap_or(1),
            message: "expected an indented block",
        });
    }
    while let Some(o) = open.pop() {
        units[o.unit].span.end = last_content_line;
    }
    Ok(units)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(units: &[Unit]) -> Vec<(UnitKind, &str, usize, usize)> {
        units
            .iter()
            .map(|u| (u.kind, u.qualified_name.as_str(), u.span.start, u.span.end))
            .collect()
    }

    #[test]
    fn class_with_two_methods_is_three_units() {
        let src = "class C:\n    def a(self):\n        return 1\n\n    def b(self):\n        return 2\n";
        let units = parse_python(src).unwrap();
        assert_eq!(
            names(&units),
            vec![
                (UnitKind::Class, "C", 1, 6),
                (UnitKind::Method, "C.a", 2, 3),
                (UnitKind::Method, "C.b", 5, 6),
            ]
        );
    }

    #[test]
    fn decorators_nesting_and_strings() {
        let src = r#"import os

@decorator(
    arg=1,
)
def top(x,
        y):
    """Doc with def fake():
    still docstring"""
    s = "class Nope:"  # comment def no
    def inner():
        return {'a': (1,
                      2)}
    return inner


class Outer:
    class Inner:
        @staticmethod
        def m(): return 1
    x = 1

async def co():
    pass
"#;
        let units = parse_python(src).unwrap();
        assert_eq!(
            names(&units),
            vec![
                (UnitKind::Function, "top", 3, 14),
                (UnitKind::Function, "top.inner", 11, 13),
                (UnitKind::Class, "Outer", 17, 21),
                (UnitKind::Class, "Outer.Inner", 18, 20),
                (UnitKind::Method, "Outer.Inner.m", 19, 20),
                (UnitKind::Function, "co", 23, 24),
            ]
        );
        assert_eq!(units[4].class.as_deref(), Some("Outer.Inner"));
    }

    #[test]
    fn syntax_errors_are_detected() {
        for src in [
            "def f(:\n    pass\n",
            "def f()\n    pass\n",
            "x = 'unterminated\n",
            "def f():\nreturn 1\n",
            "x = 1\n    y = 2\n",
            "if x:\n        a = 1\n    b = 2\n",
            "s = \"\"\"never closed\n",
            "x = (1, 2]\n",
        ] {
            assert!(parse_python(src).is_err(), "accepted: {src:?}");
        }
        assert!(parse_python("x = 1 \\\n    + 2\n").is_ok());
        assert!(parse_python("").unwrap().is_empty());
    }

    #[test]
    fn unparseable_file_degrades_to_snippet() {
        let entry = index_file("pkg/bad.py", "def f(:\n    pass\n");
        assert!(!entry.parsed);
        assert_eq!(entry.units.len(), 1);
        assert_eq!(entry.units[0].kind, UnitKind::Snippet);
        assert_eq!(entry.units[0].span, LineSpan { start: 1, end: 2 });
    }

    #[test]
    fn test_path_heuristic() {
        assert!(is_test_path("tests/test_core.py"));
        assert!(is_test_path("pkg/test_core.py"));
        assert!(is_test_path("pkg/core_test.py"));
        assert!(is_test_path("pkg/TestCore.java"));
        assert!(is_test_path("conftest.py"));
        assert!(is_test_path("testing/helpers.py"));
        assert!(!is_test_path("src/main.py"));
        assert!(!is_test_path("src/contest.py"));
        assert!(!is_test_path("src/attestation.py"));
        assert!(!is_test_path("src/latest_tests_runner.py"));
        assert!(!is_test_path("src/protest/main.py"));
    }

    #[test]
    fn framework_import_marks_test() {
        let e = index_file("src/checks.py", "import unittest\n\nclass T(unittest.TestCase):\n    def test_a(self):\n        pass\n");
        assert!(e.is_test);
        assert_eq!(e.framework_hint.as_deref(), Some("unittest"));
        let e = index_file("src/contest.py", "import os\n");
        assert!(!e.is_test);
        assert_eq!(framework_imports("from pytest import raises\n"), (true, false));
        assert_eq!(framework_imports("import os, unittest.mock\n"), (false, true));
    }

    #[test]
    fn stem_word_split() {
        assert_eq!(stem_words("TestHTTPServer"), vec!["test", "http", "server"]);
        assert_eq!(stem_words("core_test"), vec!["core", "test"]);
        assert_eq!(stem_words("contest"), vec!["contest"]);
    }

    #[test]
    fn tier_ordering() {
        assert_eq!(match_tier("Parser", "Parser"), Some(0));
        assert_eq!(match_tier("parser", "Parser"), Some(1));
        assert_eq!(match_tier("JsonParser", "parser"), Some(2));
        assert_eq!(match_tier("Lexer", "parser"), None);
    }

    fn workspace(files: &[(&str, &str)]) -> (tempfile::TempDir, Workspace) {
        let dir = tempfile::tempdir().unwrap();
        for (path, body) in files {
            let p = dir.path().join(path);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(p, body).unwrap();
        }
        let ws = Workspace::open(&crate::workspace::WorkspaceSpec::directory(dir.path())).unwrap();
        (dir, ws)
    }

    #[test]
    fn searches_over_workspace() {
        let (_d, ws) = workspace(&[
            ("b/model.py", "class Widget:\n    def render(self):\n        return 'w'\n"),
            ("a/model.py", "class Widget:\n    pass\n\n\nclass WidgetFactory:\n    def build(self):\n        # TODO marker\n        return Widget()\n\n\ndef render():\n    return None\n"),
            ("README.md", "Widgets render things.\n"),
        ]);
        let index = CodeIndex::build(&ws).unwrap();
        index.ensure_fresh(&ws).unwrap();

        let found = index.search_class("Widget");
        let got: Vec<(&str, &str)> = found.locations.iter().map(|l| (l.file.as_str(), l.qualified_name.as_str())).collect();
        assert_eq!(got, vec![("a/model.py", "Widget"), ("b/model.py", "Widget"), ("a/model.py", "WidgetFactory")]);
        assert!(index.search_class("Gadget").is_empty());
        for loc in &found.locations {
            let text = ws
                .read_file(&loc.file, Some(loc.line_span.start..=loc.line_span.end))
                .unwrap();
            assert!(text.contains("Widget"));
        }

        let funcs = index.search_func("render");
        assert_eq!(funcs.locations.len(), 2);
        assert_eq!(funcs.locations[0].qualified_name, "render");
        assert_eq!(funcs.locations[1].qualified_name, "Widget.render");

        let m = index.search_method_in_class("Widget", "render");
        assert_eq!(m.locations.len(), 1);
        assert_eq!(m.locations[0].file, "b/model.py");
        assert_eq!(m.locations[0].line_span, LineSpan { start: 2, end: 3 });

        let none = index.search_method_in_class("WidgetFactory", "render");
        assert!(none.is_empty());
        assert!(none.note.is_some());
        assert!(index.search_method_in_class("Nothing", "render").note.is_none());

        let snip = index.search_snippet("TODO marker");
        assert_eq!(snip.locations.len(), 1);
        assert_eq!(snip.locations[0].qualified_name, "WidgetFactory.build");
        let doc = index.search_snippet("render things");
        assert_eq!(doc.locations[0].file, "README.md");
        assert_eq!(doc.locations[0].unit_kind, UnitKind::Snippet);
    }

    #[test]
    fn snippet_search_is_capped() {
        let body: String = (0..30).map(|i| format!("def f{i}():\n    return 'needle'\n\n\n")).collect();
        let (_d, ws) = workspace(&[("many.py", &body)]);
        let index = CodeIndex::build(&ws).unwrap();
        let res = index.search_snippet("needle");
        assert_eq!(res.locations.len(), DEFAULT_RESULT_LIMIT);
        assert!(res.truncated);
        assert_eq!(index.search_snippet("needle"), res);
    }

    #[test]
    fn rebuild_after_edit_changes_fingerprint_and_guard_trips() {
        let (_d, ws) = workspace(&[("m.py", "def f():\n    return 1\n")]);
        let index = CodeIndex::build(&ws).unwrap();
        ws.write_file("m.py", "def f():\n    return 2\n").unwrap();
        assert!(matches!(index.ensure_fresh(&ws), Err(IndexError::Stale { .. })));
        let rebuilt = CodeIndex::build(&ws).unwrap();
        assert_ne!(rebuilt.fingerprint(), index.fingerprint());
        rebuilt.ensure_fresh(&ws).unwrap();
    }

    #[test]
    fn test_units_and_classification() {
        let (_d, ws) = workspace(&[
            ("tests/test_core.py", "import pytest\n\ndef helper():\n    pass\n\ndef test_one():\n    assert True\n"),
            ("src/main.py", "def main():\n    pass\n"),
            ("src/contest.py", "def judge():\n    pass\n"),
        ]);
        let index = CodeIndex::build(&ws).unwrap();
        assert_eq!(index.classify_test_files(), vec!["tests/test_core.py".to_string()]);
        let units = index.test_units("tests/test_core.py");
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].location.qualified_name, "test_one");
        assert_eq!(units[0].framework_hint.as_deref(), Some("pytest"));
    }
}

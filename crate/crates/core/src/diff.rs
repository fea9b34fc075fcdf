//! Unified diff model.
//!
//! Parsing and rendering of multi-file unified diffs, hunk application with
//! exact context matching (falling back to whitespace-insensitive matching),
//! and line-level diffing of in-memory file trees. Paths are always relative
//! to the workspace root; `a/` and `b/` prefixes are stripped on parse and
//! re-added on render.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use similar::{Algorithm, ChangeTag, TextDiff};
use thiserror::Error;

/// Context lines emitted around every change.
pub const CONTEXT_LINES: usize = 3;

const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";

/// Text files of a tree, keyed by workspace-relative path.
pub type TextTree = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed diff at line {line}: {message}")]
pub struct DiffParseError {
    /// 1-based line in the diff text.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub section: String,
    pub lines: Vec<HunkLine>,
    /// The last old-side line has no trailing newline.
    pub old_no_newline: bool,
    /// The last new-side line has no trailing newline.
    pub new_no_newline: bool,
}

impl Hunk {
    pub fn header(&self) -> String {
        let mut header = format!(
            "@@ -{},{} +{},{} @@",
            self.old_start, self.old_len, self.new_start, self.new_len
        );
        if !self.section.is_empty() {
            header.push(' ');
            header.push_str(&self.section);
        }
        header
    }

    fn old_side(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Remove(s) => Some(s.as_str()),
                HunkLine::Add(_) => None,
            })
            .collect()
    }
}

/// Changes to a single file. `None` on either side stands for `/dev/null`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl FilePatch {
    /// The path this patch leaves behind (or removes, for deletions).
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or_default()
    }

    pub fn is_creation(&self) -> bool {
        self.old_path.is_none()
    }

    pub fn is_deletion(&self) -> bool {
        self.new_path.is_none()
    }
}

/// A parsed multi-file unified diff.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Patch {
    pub files: Vec<FilePatch>,
}

impl Patch {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, DiffParseError> {
        Parser::new(text).parse()
    }

    /// Every path read or written by the patch.
    pub fn touched_paths(&self) -> BTreeSet<String> {
        let mut paths = BTreeSet::new();
        for fp in &self.files {
            paths.extend(fp.old_path.iter().cloned());
            paths.extend(fp.new_path.iter().cloned());
        }
        paths
    }

    /// Added lines per resulting file, numbered on the new side (1-based).
    pub fn added_lines(&self) -> BTreeMap<String, Vec<(usize, String)>> {
        let mut out: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for fp in &self.files {
            let Some(path) = fp.new_path.as_ref() else {
                continue;
            };
            for hunk in &fp.hunks {
                let mut line_no = hunk.new_start.max(1);
                for line in &hunk.lines {
                    match line {
                        HunkLine::Context(_) => line_no += 1,
                        HunkLine::Add(text) => {
                            out.entry(path.clone()).or_default().push((line_no, text.clone()));
                            line_no += 1;
                        }
                        HunkLine::Remove(_) => {}
                    }
                }
            }
        }
        out
    }

    /// Keeps only the file patches whose resulting path satisfies `keep`.
    pub fn filter_files(&self, mut keep: impl FnMut(&str) -> bool) -> Patch {
        Patch {
            files: self.files.iter().filter(|fp| keep(fp.path())).cloned().collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for fp in &self.files {
            match &fp.old_path {
                Some(p) => out.push_str(&format!("--- a/{p}\n")),
                None => out.push_str("--- /dev/null\n"),
            }
            match &fp.new_path {
                Some(p) => out.push_str(&format!("+++ b/{p}\n")),
                None => out.push_str("+++ /dev/null\n"),
            }
            for hunk in &fp.hunks {
                out.push_str(&hunk.header());
                out.push('\n');
                let last_old = hunk
                    .lines
                    .iter()
                    .rposition(|l| !matches!(l, HunkLine::Add(_)));
                let last_new = hunk
                    .lines
                    .iter()
                    .rposition(|l| !matches!(l, HunkLine::Remove(_)));
                for (i, line) in hunk.lines.iter().enumerate() {
                    let (prefix, text) = match line {
                        HunkLine::Context(s) => (' ', s),
                        HunkLine::Remove(s) => ('-', s),
                        HunkLine::Add(s) => ('+', s),
                    };
                    out.push(prefix);
                    out.push_str(text);
                    out.push('\n');
                    let marks_old = hunk.old_no_newline && Some(i) == last_old;
                    let marks_new = hunk.new_no_newline && Some(i) == last_new;
                    if marks_old || marks_new {
                        out.push_str(NO_NEWLINE_MARKER);
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Rejects absolute paths, parent traversal and empty components.
pub fn validate_relative_path(path: &str) -> Result<(), String> {
    if path.is_empty() {
        return Err("empty path".into());
    }
    if path.starts_with('/') || path.starts_with('\\') || path.contains(':') && cfg!(windows) {
        return Err(format!("absolute path `{path}`"));
    }
    for component in path.split('/') {
        match component {
            ".." => return Err(format!("parent traversal in `{path}`")),
            "" => return Err(format!("empty component in `{path}`")),
            _ => {}
        }
    }
    Ok(())
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

const GIT_EXTENDED_HEADERS: &[&str] = &[
    "diff ",
    "index ",
    "new file mode",
    "deleted file mode",
    "old mode",
    "new mode",
    "similarity index",
    "dissimilarity index",
    "rename from",
    "rename to",
    "copy from",
    "copy to",
];

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        Self { lines, pos: 0 }
    }

    fn error(&self, message: impl Into<String>) -> DiffParseError {
        DiffParseError {
            line: self.pos + 1,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<Patch, DiffParseError> {
        let mut files = Vec::new();
        while let Some(line) = self.peek() {
            if line.trim().is_empty() || GIT_EXTENDED_HEADERS.iter().any(|h| line.starts_with(h)) {
                self.pos += 1;
                continue;
            }
            if !line.starts_with("--- ") {
                return Err(self.error(format!("expected `--- ` file header, found `{}`", clip(line))));
            }
            files.push(self.parse_file()?);
        }
        Ok(Patch { files })
    }

    fn parse_path(&self, raw: &str, prefix: &str) -> Result<Option<String>, DiffParseError> {
        let raw = raw.split('\t').next().unwrap_or_default().trim_end();
        if raw == "/dev/null" {
            return Ok(None);
        }
        let path = raw
            .strip_prefix(prefix)
            .or_else(|| raw.strip_prefix("a/"))
            .or_else(|| raw.strip_prefix("b/"))
            .unwrap_or(raw);
        validate_relative_path(path).map_err(|e| self.error(e))?;
        Ok(Some(path.to_string()))
    }

    fn parse_file(&mut self) -> Result<FilePatch, DiffParseError> {
        let old_raw = &self.peek().unwrap_or_default()[4..];
        let old_path = self.parse_path(old_raw, "a/")?;
        self.pos += 1;
        let new_line = self
            .peek()
            .ok_or_else(|| self.error("missing `+++ ` header"))?;
        let Some(new_raw) = new_line.strip_prefix("+++ ") else {
            return Err(self.error("expected `+++ ` header"));
        };
        let new_path = self.parse_path(new_raw, "b/")?;
        if old_path.is_none() && new_path.is_none() {
            return Err(self.error("both sides are /dev/null"));
        }
        self.pos += 1;

        let mut hunks = Vec::new();
        while let Some(line) = self.peek() {
            if !line.starts_with("@@") {
                break;
            }
            hunks.push(self.parse_hunk()?);
        }
        if hunks.is_empty() && old_path.is_some() && new_path.is_some() {
            return Err(self.error("file header without hunks"));
        }
        Ok(FilePatch {
            old_path,
            new_path,
            hunks,
        })
    }

    fn parse_hunk(&mut self) -> Result<Hunk, DiffParseError> {
        let header = self.peek().unwrap_or_default();
        let (old_start, old_len, new_start, new_len, section) =
            parse_hunk_header(header).ok_or_else(|| self.error(format!("bad hunk header `{}`", clip(header))))?;
        self.pos += 1;

        let mut hunk = Hunk {
            old_start,
            old_len,
            new_start,
            new_len,
            section,
            lines: Vec::new(),
            old_no_newline: false,
            new_no_newline: false,
        };
        let (mut old_seen, mut new_seen) = (0usize, 0usize);
        while old_seen < old_len || new_seen < new_len {
            let Some(line) = self.peek() else {
                return Err(self.error("unexpected end of diff inside hunk"));
            };
            let parsed = if line.is_empty() {
                HunkLine::Context(String::new())
            } else {
                let (prefix, rest) = line.split_at(1);
                match prefix {
                    " " => HunkLine::Context(rest.to_string()),
                    "-" => HunkLine::Remove(rest.to_string()),
                    "+" => HunkLine::Add(rest.to_string()),
                    "\\" => {
                        self.mark_no_newline(&mut hunk);
                        self.pos += 1;
                        continue;
                    }
                    _ => return Err(self.error(format!("unexpected line in hunk `{}`", clip(line)))),
                }
            };
            match &parsed {
                HunkLine::Context(_) => {
                    old_seen += 1;
                    new_seen += 1;
                }
                HunkLine::Remove(_) => old_seen += 1,
                HunkLine::Add(_) => new_seen += 1,
            }
            if old_seen > old_len || new_seen > new_len {
                return Err(self.error("hunk body longer than its header declares"));
            }
            hunk.lines.push(parsed);
            self.pos += 1;
        }
        if let Some(line) = self.peek() {
            if line.starts_with('\\') {
                self.mark_no_newline(&mut hunk);
                self.pos += 1;
            }
        }
        Ok(hunk)
    }

    fn mark_no_newline(&self, hunk: &mut Hunk) {
        match hunk.lines.last() {
            Some(HunkLine::Context(_)) => {
                hunk.old_no_newline = true;
                hunk.new_no_newline = true;
            }
            Some(HunkLine::Remove(_)) => hunk.old_no_newline = true,
            Some(HunkLine::Add(_)) => hunk.new_no_newline = true,
            None => {}
        }
    }
}

fn clip(s: &str) -> String {
    s.chars().take(60).collect()
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize, String)> {
    let rest = line.strip_prefix("@@ -")?;
    let (ranges, section) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let parse_range = |r: &str| -> Option<(usize, usize)> {
        match r.split_once(',') {
            Some((start, len)) => Some((start.parse().ok()?, len.parse().ok()?)),
            None => Some((r.parse().ok()?, 1)),
        }
    };
    let (old_start, old_len) = parse_range(old)?;
    let (new_start, new_len) = parse_range(new)?;
    Some((old_start, old_len, new_start, new_len, section.trim().to_string()))
}

/// A file body split into lines, remembering whether it ends with a newline.
#[derive(Debug, Clone, PartialEq, Eq)]
struct TextFile {
    lines: Vec<String>,
    trailing_newline: bool,
}

impl TextFile {
    fn parse(text: &str) -> Self {
        if text.is_empty() {
            return Self {
                lines: Vec::new(),
                trailing_newline: true,
            };
        }
        let trailing_newline = text.ends_with('\n');
        let body = if trailing_newline { &text[..text.len() - 1] } else { text };
        Self {
            lines: body.split('\n').map(str::to_string).collect(),
            trailing_newline,
        }
    }

    fn render(&self) -> String {
        let mut out = self.lines.join("\n");
        if self.trailing_newline && !self.lines.is_empty() {
            out.push('\n');
        }
        out
    }
}

/// A hunk that could not be placed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HunkFailure {
    pub file: String,
    pub hunk_header: String,
    pub reason: String,
}

impl fmt::Display for HunkFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.file, self.hunk_header, self.reason)
    }
}

fn squash_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn find_block(haystack: &[String], needle: &[&str], from: usize, expected: usize) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    let last = haystack.len() - needle.len();
    if from > last {
        return None;
    }
    let expected = expected.clamp(from, last);
    let candidates = (0..=last - from).flat_map(|d| {
        let below = expected.checked_sub(d).filter(|p| *p >= from);
        let above = Some(expected + d).filter(|p| *p <= last && d > 0);
        below.into_iter().chain(above)
    });
    let candidates: Vec<usize> = candidates.collect();
    let exact = candidates
        .iter()
        .copied()
        .find(|&p| needle.iter().zip(&haystack[p..]).all(|(a, b)| *a == b));
    exact.or_else(|| {
        let squashed: Vec<String> = needle.iter().map(|s| squash_ws(s)).collect();
        candidates
            .iter()
            .copied()
            .find(|&p| squashed.iter().zip(&haystack[p..]).all(|(a, b)| *a == squash_ws(b)))
    })
}

/// Applies one file patch to the file's current content (`None` = absent).
///
/// Returns the new content, or `None` when the patch deletes the file.
pub fn apply_file_patch(original: Option<&str>, fp: &FilePatch) -> Result<Option<String>, Vec<HunkFailure>> {
    let file = fp.path().to_string();
    let whole_file_failure = |reason: &str| {
        vec![HunkFailure {
            file: file.clone(),
            hunk_header: "(file)".into(),
            reason: reason.into(),
        }]
    };
    let mut text = match (original, fp.is_creation()) {
        (Some(existing), true) if !existing.is_empty() => {
            return Err(whole_file_failure("file already exists"));
        }
        (None, false) => return Err(whole_file_failure("file does not exist")),
        (orig, _) => TextFile::parse(orig.unwrap_or_default()),
    };

    let mut failures = Vec::new();
    let mut shift: isize = 0;
    let mut min_pos = 0usize;
    for hunk in &fp.hunks {
        let old_side = hunk.old_side();
        let base = if old_side.is_empty() {
            hunk.old_start
        } else {
            hunk.old_start.saturating_sub(1)
        };
        let expected = (base as isize + shift).max(0) as usize;
        let pos = if old_side.is_empty() {
            Some(expected.clamp(min_pos, text.lines.len().max(min_pos)))
                .filter(|p| *p <= text.lines.len())
        } else {
            find_block(&text.lines, &old_side, min_pos, expected)
        };
        let Some(pos) = pos else {
            failures.push(HunkFailure {
                file: file.clone(),
                hunk_header: hunk.header(),
                reason: "context does not match".into(),
            });
            continue;
        };

        let reaches_eof = pos + old_side.len() == text.lines.len();
        let mut replacement = Vec::with_capacity(hunk.new_len);
        let mut cursor = pos;
        for line in &hunk.lines {
            match line {
                HunkLine::Context(_) => {
                    replacement.push(text.lines[cursor].clone());
                    cursor += 1;
                }
                HunkLine::Remove(_) => cursor += 1,
                HunkLine::Add(s) => replacement.push(s.clone()),
            }
        }
        let new_len = replacement.len();
        text.lines.splice(pos..pos + old_side.len(), replacement);
        if reaches_eof {
            text.trailing_newline = !hunk.new_no_newline;
        }
        shift = pos as isize - base as isize + new_len as isize - old_side.len() as isize;
        min_pos = pos + new_len;
    }

    if !failures.is_empty() {
        return Err(failures);
    }
    if fp.is_deletion() {
        if !text.lines.is_empty() {
            return Err(whole_file_failure("deletion leaves residual content"));
        }
        return Ok(None);
    }
    Ok(Some(text.render()))
}

/// Applies a whole patch to an in-memory tree. All-or-nothing.
pub fn apply_to_tree(tree: &mut TextTree, patch: &Patch) -> Result<(), Vec<HunkFailure>> {
    let mut staged = tree.clone();
    let mut failures = Vec::new();
    for fp in &patch.files {
        let source = fp.old_path.as_ref().and_then(|p| staged.get(p)).cloned();
        match apply_file_patch(source.as_deref(), fp) {
            Ok(result) => {
                if let Some(old) = &fp.old_path {
                    staged.remove(old);
                }
                if let (Some(new_path), Some(body)) = (&fp.new_path, result) {
                    staged.insert(new_path.clone(), body);
                }
            }
            Err(mut f) => failures.append(&mut f),
        }
    }
    if failures.is_empty() {
        *tree = staged;
        Ok(())
    } else {
        Err(failures)
    }
}

/// Line diff of one file. Returns `None` when both sides are identical.
pub fn diff_file(path: &str, old: Option<&str>, new: Option<&str>) -> Option<FilePatch> {
    if old == new {
        return None;
    }
    let old_text = old.unwrap_or_default();
    let new_text = new.unwrap_or_default();
    let diff = TextDiff::configure()
        .algorithm(Algorithm::Myers)
        .diff_lines(old_text, new_text);

    let mut hunks = Vec::new();
    for group in diff.grouped_ops(CONTEXT_LINES) {
        let (Some(first), Some(last)) = (group.first(), group.last()) else {
            continue;
        };
        let old_start = first.old_range().start;
        let old_len = last.old_range().end - old_start;
        let new_start = first.new_range().start;
        let new_len = last.new_range().end - new_start;
        let mut hunk = Hunk {
            old_start: if old_len == 0 { old_start } else { old_start + 1 },
            old_len,
            new_start: if new_len == 0 { new_start } else { new_start + 1 },
            new_len,
            section: String::new(),
            lines: Vec::new(),
            old_no_newline: false,
            new_no_newline: false,
        };
        for op in &group {
            for change in diff.iter_changes(op) {
                let value = change.value();
                let missing_nl = !value.ends_with('\n');
                let body = value.strip_suffix('\n').unwrap_or(value).to_string();
                match change.tag() {
                    ChangeTag::Equal => {
                        hunk.old_no_newline |= missing_nl;
                        hunk.new_no_newline |= missing_nl;
                        hunk.lines.push(HunkLine::Context(body));
                    }
                    ChangeTag::Delete => {
                        hunk.old_no_newline |= missing_nl;
                        hunk.lines.push(HunkLine::Remove(body));
                    }
                    ChangeTag::Insert => {
                        hunk.new_no_newline |= missing_nl;
                        hunk.lines.push(HunkLine::Add(body));
                    }
                }
            }
        }
        hunks.push(hunk);
    }
    Some(FilePatch {
        old_path: old.map(|_| path.to_string()),
        new_path: new.map(|_| path.to_string()),
        hunks,
    })
}

/// Unified diff between two trees, files in path order.
pub fn diff_trees(old: &TextTree, new: &TextTree) -> Patch {
    let paths: BTreeSet<&String> = old.keys().chain(new.keys()).collect();
    let files = paths
        .into_iter()
        .filter_map(|p| diff_file(p, old.get(p).map(String::as_str), new.get(p).map(String::as_str)))
        .collect();
    Patch { files }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(entries: &[(&str, &str)]) -> TextTree {
        entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_git_style_diff() {
        let text = "diff --git a/src/x.py b/src/x.py\nindex 123..456 100644\n--- a/src/x.py\n+++ b/src/x.py\n@@ -1,3 +1,3 @@ def f():\n a\n-b\n+B\n c\n";
        let patch = Patch::parse(text).unwrap();
        assert_eq!(patch.files.len(), 1);
        let fp = &patch.files[0];
        assert_eq!(fp.path(), "src/x.py");
        assert_eq!(fp.hunks[0].section, "def f():");
        assert_eq!(fp.hunks[0].lines.len(), 4);
    }

    #[test]
    fn empty_text_is_empty_patch() {
        assert!(Patch::parse("").unwrap().is_empty());
        assert!(Patch::parse("\n\n").unwrap().is_empty());
    }

    #[test]
    fn parse_error_reports_line() {
        let err = Patch::parse("--- a/x\n+++ b/x\n@@ -1,2 +1,2 @@\n a\n?b\n").unwrap_err();
        assert_eq!(err.line, 5);
        let err = Patch::parse("hello world\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn rejects_path_escape() {
        let err = Patch::parse("--- a/../etc/passwd\n+++ b/../etc/passwd\n@@ -1 +1 @@\n-a\n+b\n").unwrap_err();
        assert!(err.message.contains("parent traversal"));
        assert!(Patch::parse("--- /etc/passwd\n+++ /etc/passwd\n@@ -1 +1 @@\n-a\n+b\n").is_err());
    }

    #[test]
    fn truncated_hunk_is_rejected() {
        let err = Patch::parse("--- a/x\n+++ b/x\n@@ -1,3 +1,3 @@\n a\n").unwrap_err();
        assert!(err.message.contains("end of diff"));
    }

    #[test]
    fn diff_then_apply_roundtrip() {
        let old = tree(&[("a.txt", "1\n2\n3\n4\n5\n6\n7\n8\n9\n10\n"), ("gone.txt", "bye\n")]);
        let new = tree(&[("a.txt", "1\n2\nthree\n4\n5\n6\n7\n8\nnine\n10\n"), ("new.txt", "hi")]);
        let patch = diff_trees(&old, &new);
        let reparsed = Patch::parse(&patch.render()).unwrap();
        assert_eq!(reparsed, patch);
        let mut work = old.clone();
        apply_to_tree(&mut work, &reparsed).unwrap();
        assert_eq!(work, new);
    }

    #[test]
    fn missing_newline_roundtrip() {
        let old = tree(&[("a", "x\ny")]);
        let new = tree(&[("a", "x\ny\n")]);
        let patch = diff_trees(&old, &new);
        let rendered = patch.render();
        assert!(rendered.contains(NO_NEWLINE_MARKER));
        let mut work = old.clone();
        apply_to_tree(&mut work, &Patch::parse(&rendered).unwrap()).unwrap();
        assert_eq!(work, new);
    }

    #[test]
    fn applies_with_offset() {
        let patch = Patch::parse("--- a/f\n+++ b/f\n@@ -1,3 +1,3 @@\n a\n-b\n+B\n c\n").unwrap();
        let out = apply_file_patch(Some("x\ny\na\nb\nc\n"), &patch.files[0]).unwrap();
        assert_eq!(out.as_deref(), Some("x\ny\na\nB\nc\n"));
    }

    #[test]
    fn whitespace_tolerant_fallback() {
        let patch = Patch::parse("--- a/f\n+++ b/f\n@@ -1,3 +1,3 @@\n a  =  1\n-b\n+B\n c\n").unwrap();
        let out = apply_file_patch(Some("a = 1\nb\nc\n"), &patch.files[0]).unwrap();
        assert_eq!(out.as_deref(), Some("a = 1\nB\nc\n"));
    }

    #[test]
    fn stale_context_fails() {
        let patch = Patch::parse("--- a/f\n+++ b/f\n@@ -1,3 +1,3 @@\n a\n-b\n+B\n c\n").unwrap();
        let failures = apply_file_patch(Some("a\nq\nc\n"), &patch.files[0]).unwrap_err();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].hunk_header, "@@ -1,3 +1,3 @@");
    }

    #[test]
    fn creation_over_existing_file_fails() {
        let patch = diff_trees(&TextTree::new(), &tree(&[("n", "1\n")]));
        assert!(apply_file_patch(Some("other\n"), &patch.files[0]).is_err());
        assert_eq!(apply_file_patch(None, &patch.files[0]).unwrap().as_deref(), Some("1\n"));
    }

    #[test]
    fn added_lines_are_numbered_on_new_side() {
        let old = tree(&[("f", "a\nb\nc\nd\n")]);
        let new = tree(&[("f", "a\nX\nc\nd\nY\n")]);
        let added = diff_trees(&old, &new).added_lines();
        assert_eq!(added["f"], vec![(2, "X".to_string()), (5, "Y".to_string())]);
    }

    #[test]
    fn identical_trees_give_empty_patch() {
        let t = tree(&[("a", "1\n")]);
        assert!(diff_trees(&t, &t).is_empty());
        assert_eq!(diff_trees(&t, &t).render(), "");
    }
}

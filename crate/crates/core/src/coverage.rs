//! Line-coverage reports in LCOV interchange format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed LCOV at line {line}: {message}")]
pub struct LcovError {
    pub line: usize,
    pub message: String,
}

/// Executable lines and their hit counts, per workspace-relative file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub files: BTreeMap<String, BTreeMap<u32, u64>>,
}

impl CoverageReport {
    /// Parses `SF:` / `DA:` / `end_of_record` records. Absolute source paths
    /// under `root` are made relative; other record types are ignored.
    pub fn parse_lcov(text: &str, root: Option<&str>) -> Result<Self, LcovError> {
        let mut report = CoverageReport::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: &str| LcovError {
                line: i + 1,
                message: message.to_string(),
            };
            if let Some(path) = line.strip_prefix("SF:") {
                let mut path = path.trim().to_string();
                if let Some(root) = root {
                    let prefix = format!("{}/", root.trim_end_matches('/'));
                    if let Some(rel) = path.strip_prefix(&prefix) {
                        path = rel.to_string();
                    }
                }
                if let Some(rel) = path.strip_prefix("./") {
                    path = rel.to_string();
                }
                report.files.entry(path.clone()).or_default();
                current = Some(path);
            } else if let Some(rest) = line.strip_prefix("DA:") {
                let file = current.as_ref().ok_or_else(|| err("DA record outside SF block"))?;
                let mut parts = rest.split(',');
                let line_no: u32 = parts
                    .next()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| err("bad DA line number"))?;
                let hits: u64 = parts
                    .next()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| err("bad DA hit count"))?;
                let entry = report.files.entry(file.clone()).or_default().entry(line_no).or_insert(0);
                *entry += hits;
            } else if line == "end_of_record" {
                current = None;
            }
        }
        Ok(report)
    }

    /// Hit count of an executable line; `None` when the line is not executable
    /// or the file is absent from the report.
    pub fn hits(&self, file: &str, line: u32) -> Option<u64> {
        self.files.get(file)?.get(&line).copied()
    }

    pub fn has_file(&self, file: &str) -> bool {
        self.files.contains_key(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_relativizes() {
        let text = "TN:\nSF:/work/pkg/a.py\nDA:1,1\nDA:2,0\nLF:2\nLH:1\nend_of_record\nSF:pkg/b.py\nDA:3,4\nend_of_record\n";
        let report = CoverageReport::parse_lcov(text, Some("/work")).unwrap();
        assert_eq!(report.hits("pkg/a.py", 1), Some(1));
        assert_eq!(report.hits("pkg/a.py", 2), Some(0));
        assert_eq!(report.hits("pkg/a.py", 3), None);
        assert_eq!(report.hits("pkg/b.py", 3), Some(4));
    }

    #[test]
    fn da_outside_block_is_error() {
        let err = CoverageReport::parse_lcov("DA:1,1\n", None).unwrap_err();
        assert_eq!(err.line, 1);
    }
}

//! Compact pass/fail summaries from test-runner output.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::workspace::CommandResult;

const SUMMARY_TAIL_CHARS: usize = 1500;
const MAX_LISTED_FAILURES: usize = 10;

static DURATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b\d+(\.\d+)?s\b").expect("valid"));
static PYTEST_COUNTS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+) (passed|failed|errors?|skipped|xfailed|xpassed|deselected)").expect("valid"));
static PYTEST_FINAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^=*\s*(no tests ran|\d+ (passed|failed|errors?|skipped|xfailed|xpassed|deselected))").expect("valid"));
static UNITTEST_RAN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Ran (\d+) tests? in ").expect("valid"));
static UNITTEST_FAILED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^FAILED \((.*)\)").expect("valid"));
static UNITTEST_KV: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(failures|errors|skipped)=(\d+)").expect("valid"));
static UNITTEST_FAIL_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(FAIL|ERROR): (.+)$").expect("valid"));
static CARGO_RESULT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"test result: \w+\. (\d+) passed; (\d+) failed; (\d+) ignored").expect("valid")
});
static CARGO_FAIL_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^test (\S+) \.\.\. FAILED$").expect("valid"));

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSummary {
    /// Runner family recognized in the output, if any.
    pub runner: Option<String>,
    pub passed: u64,
    pub failed: u64,
    pub errors: u64,
    pub skipped: u64,
    pub failures: Vec<String>,
    pub exit_code: i32,
    pub timed_out: bool,
}

impl TestSummary {
    pub fn all_passed(&self) -> bool {
        self.exit_code == 0 && !self.timed_out && self.failed == 0 && self.errors == 0
    }

    pub fn headline(&self) -> String {
        if self.timed_out {
            return "timed out".into();
        }
        match &self.runner {
            Some(_) => {
                let mut parts = vec![format!("{} passed", self.passed), format!("{} failed", self.failed)];
                if self.errors > 0 {
                    parts.push(format!("{} errors", self.errors));
                }
                if self.skipped > 0 {
                    parts.push(format!("{} skipped", self.skipped));
                }
                parts.join(", ")
            }
            None if self.exit_code == 0 => "passed (exit 0)".into(),
            None => format!("failed (exit {})", self.exit_code),
        }
    }
}

/// Replaces timings such as `0.12s` so summaries are reproducible.
pub fn scrub_durations(text: &str) -> String {
    DURATION.replace_all(text, "<t>s").into_owned()
}

fn parse_pytest(text: &str, s: &mut TestSummary) -> bool {
    let Some(line) = text.lines().rev().find(|l| PYTEST_FINAL.is_match(l.trim())) else {
        return false;
    };
    for cap in PYTEST_COUNTS.captures_iter(line) {
        let n: u64 = cap[1].parse().unwrap_or(0);
        match &cap[2] {
            "passed" | "xpassed" => s.passed += n,
            "failed" => s.failed += n,
            "error" | "errors" => s.errors += n,
            _ => s.skipped += n,
        }
    }
    s.failures = text
        .lines()
        .filter_map(|l| l.strip_prefix("FAILED ").or_else(|| l.strip_prefix("ERROR ")))
        .map(|l| l.trim().to_string())
        .collect();
    s.runner = Some("pytest".into());
    true
}

fn parse_unittest(text: &str, s: &mut TestSummary) -> bool {
    let Some(ran) = text.lines().find_map(|l| UNITTEST_RAN.captures(l.trim())) else {
        return false;
    };
    let total: u64 = ran[1].parse().unwrap_or(0);
    if let Some(failed) = text.lines().find_map(|l| UNITTEST_FAILED.captures(l.trim())) {
        for kv in UNITTEST_KV.captures_iter(&failed[1]) {
            let n: u64 = kv[2].parse().unwrap_or(0);
            match &kv[1] {
                "failures" => s.failed = n,
                "errors" => s.errors = n,
                _ => s.skipped = n,
            }
        }
    } else if let Some(ok) = text.lines().find(|l| l.trim().starts_with("OK")) {
        if let Some(kv) = UNITTEST_KV.captures(ok) {
            s.skipped = kv[2].parse().unwrap_or(0);
        }
    }
    s.passed = total.saturating_sub(s.failed + s.errors + s.skipped);
    s.failures = text
        .lines()
        .filter_map(|l| UNITTEST_FAIL_NAME.captures(l.trim()).map(|c| format!("{}: {}", &c[1], &c[2])))
        .collect();
    s.runner = Some("unittest".into());
    true
}

fn parse_cargo(text: &str, s: &mut TestSummary) -> bool {
    let mut found = false;
    for cap in CARGO_RESULT.captures_iter(text) {
        found = true;
        s.passed += cap[1].parse::<u64>().unwrap_or(0);
        s.failed += cap[2].parse::<u64>().unwrap_or(0);
        s.skipped += cap[3].parse::<u64>().unwrap_or(0);
    }
    if found {
        s.failures = text
            .lines()
            .filter_map(|l| CARGO_FAIL_NAME.captures(l.trim()).map(|c| c[1].to_string()))
            .collect();
        s.runner = Some("cargo".into());
    }
    found
}

/// Parses counts from known runner output; falls back to the exit code.
pub fn parse_test_output(result: &CommandResult) -> TestSummary {
    let text = result.combined_output();
    let mut s = TestSummary {
        exit_code: result.exit_code,
        timed_out: result.timed_out,
        ..Default::default()
    };
    if !result.timed_out {
        let _ = parse_pytest(&text, &mut s) || parse_unittest(&text, &mut s) || parse_cargo(&text, &mut s);
    }
    if s.exit_code != 0 && s.runner.is_some() && s.failed == 0 && s.errors == 0 {
        // Collection errors and crashes show up only in the exit code.
        s.errors = 1;
    }
    s
}

/// Deterministic, bounded failure summary for an execution record.
pub fn failure_summary(summary: &TestSummary, result: &CommandResult) -> String {
    if summary.all_passed() {
        return summary.headline();
    }
    let mut out = summary.headline();
    for f in summary.failures.iter().take(MAX_LISTED_FAILURES) {
        out.push_str("\n  ");
        out.push_str(f);
    }
    if summary.failures.len() > MAX_LISTED_FAILURES {
        out.push_str(&format!("\n  … {} more", summary.failures.len() - MAX_LISTED_FAILURES));
    }
    let output = scrub_durations(&result.combined_output());
    let trimmed = output.trim_end();
    if !trimmed.is_empty() {
        let total = trimmed.chars().count();
        let tail: String = trimmed.chars().skip(total.saturating_sub(SUMMARY_TAIL_CHARS)).collect();
        out.push_str("\n--- output tail ---\n");
        out.push_str(&tail);
    }
    out
}

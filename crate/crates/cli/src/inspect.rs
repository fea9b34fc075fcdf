//! `eval`, `replay`, `stats` and `check`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use use_engine::bench;
use use_engine::meta::Trajectory;
use use_engine::stats;

use crate::artifacts;
use crate::run::load_manifests;
use crate::Failure;

pub fn cmd_eval(manifest: &Path, solution: &Path, json: bool) -> Result<u8, Failure> {
    let task = bench::load_task(manifest).map_err(|e| Failure::Usage(e.into()))?;
    let text = fs::read_to_string(solution)
        .with_context(|| format!("reading {}", solution.display()))
        .map_err(Failure::Usage)?;
    let verdict = bench::evaluate(&task, &text).map_err(|e| Failure::Usage(e.into()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&verdict).expect("verdict serializes"));
    } else {
        println!(
            "{}: {} ({})\n{}",
            task.id,
            if verdict.resolved { "resolved" } else { "unresolved" },
            verdict.metric,
            verdict.detail
        );
    }
    Ok(if verdict.resolved { 0 } else { 1 })
}

fn indent(text: &str, prefix: &str) -> String {
    text.lines().map(|l| format!("{prefix}{l}\n")).collect()
}

pub fn render_trajectory(t: &Trajectory) -> String {
    let h = &t.header;
    let enabled: Vec<String> = h.enabled.iter().map(|a| a.to_string()).collect();
    let mut out = format!(
        "task {} | model {} | mode {} | max rounds {} | actions {}\n",
        h.task_id,
        h.model,
        h.mode,
        h.max_rounds,
        enabled.join(", ")
    );
    for s in &t.steps {
        let _ = writeln!(out, "\n[{}] {} {}", s.round, s.action, s.arguments);
        if let Some(e) = &s.error {
            let _ = writeln!(out, "  rejected: {e}");
        }
        out.push_str(&indent(s.narrative.trim_end(), "  | "));
        if let Some(v) = s.verdict {
            let _ = writeln!(out, "  verdict: {}", v.as_str());
        }
        let _ = writeln!(
            out,
            "  delta: {}\n  usage: {} calls, {} prompt + {} completion tokens, ${:.6}",
            s.delta, s.usage.calls, s.usage.prompt_tokens, s.usage.completion_tokens, s.usage.cost_usd
        );
    }
    if let Some(term) = &t.terminal {
        let ids: Vec<&str> = term.ids.iter().map(|d| d.as_str()).collect();
        let _ = writeln!(
            out,
            "\n== {} after {} rounds: chosen {} [{}]{}",
            term.kind,
            term.rounds,
            term.chosen.as_ref().map(|d| d.as_str()).unwrap_or("empty"),
            ids.join(", "),
            if term.fallback { " (fallback rule)" } else { "" }
        );
        if let Some(m) = &term.message {
            out.push_str(&indent(m, "   "));
        }
    }
    out
}

pub fn cmd_replay(path: &Path) -> Result<u8, Failure> {
    let trajectory = artifacts::read_trajectory(path).map_err(Failure::Usage)?;
    print!("{}", render_trajectory(&trajectory));
    Ok(0)
}

pub fn cmd_stats(results: &Path, json: bool) -> Result<u8, Failure> {
    let runs = artifacts::load_summaries(results).map_err(Failure::Usage)?;
    if runs.is_empty() {
        return Err(Failure::Usage(anyhow!("no run artifacts under {}", results.display())));
    }
    let report = stats::report(&runs);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render_text());
    }
    Ok(0)
}

pub fn cmd_check(manifest: &Path) -> Result<u8, Failure> {
    let tasks = load_manifests(manifest).map_err(Failure::Usage)?;
    let mut bad = 0;
    for task in &tasks {
        let check = bench::self_check(task).map_err(|e| Failure::Usage(e.into()))?;
        let gold = match &check.gold {
            Some(v) => format!("gold {} ({})", if v.resolved { "resolved" } else { "UNRESOLVED" }, v.metric),
            None => "no gold solution".into(),
        };
        println!(
            "{} {}: {gold}; empty {} ({})",
            if check.ok() { "ok  " } else { "FAIL" },
            task.id,
            if check.empty.resolved { "RESOLVED" } else { "unresolved" },
            check.empty.metric
        );
        if !check.ok() {
            bad += 1;
        }
    }
    Ok(if bad == 0 { 0 } else { 1 })
}

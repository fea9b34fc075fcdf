//! Fleet statistics over finished runs: step-position action histograms,
//! per-action cost, pass@k tables and the wall-time/cost correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::actions::ActionName;
use crate::bench::pass_at_k;

/// What the stats need to know about one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task_id: String,
    pub task_type: String,
    pub run: usize,
    pub resolved: Option<bool>,
    pub actions: Vec<ActionName>,
    pub cost_by_label: BTreeMap<String, f64>,
    pub cost_usd: f64,
    pub wall_time: f64,
}

/// Step number (1-based) to action counts.
pub type Histogram = BTreeMap<usize, BTreeMap<ActionName, usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostShare {
    pub total: f64,
    pub per_run: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRow {
    pub group: String,
    pub k: usize,
    pub tasks: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub runs: usize,
    pub histograms: BTreeMap<String, Histogram>,
    pub cost: BTreeMap<String, CostShare>,
    pub pass_at_k: Vec<PassRow>,
    /// Pearson correlation of per-run wall time and cost; `None` when either
    /// is constant or there are fewer than two runs.
    pub time_cost_correlation: Option<f64>,
}

pub fn step_histogram<'a>(sequences: impl IntoIterator<Item = &'a [ActionName]>) -> Histogram {
    let mut hist = Histogram::new();
    for seq in sequences {
        for (i, a) in seq.iter().enumerate() {
            *hist.entry(i + 1).or_default().entry(*a).or_default() += 1;
        }
    }
    hist
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

pub fn cost_breakdown(runs: &[RunSummary]) -> BTreeMap<String, CostShare> {
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for r in runs {
        for (label, cost) in &r.cost_by_label {
            *totals.entry(label.clone()).or_default() += cost;
        }
    }
    let grand: f64 = totals.values().sum();
    let n = runs.len().max(1) as f64;
    totals
        .into_iter()
        .map(|(label, total)| {
            let share = if grand > 0.0 { total / grand } else { 0.0 };
            (
                label,
                CostShare {
                    total,
                    per_run: total / n,
                    share,
                },
            )
        })
        .collect()
}

/// Outcome lists per task, ordered by run number, for runs with a verdict.
fn outcomes<'a>(runs: impl Iterator<Item = &'a RunSummary>) -> Vec<Vec<bool>> {
    let mut by_task: BTreeMap<&str, Vec<(usize, bool)>> = BTreeMap::new();
    for r in runs {
        if let Some(ok) = r.resolved {
            by_task.entry(&r.task_id).or_default().push((r.run, ok));
        }
    }
    by_task
        .into_values()
        .map(|mut v| {
            v.sort();
            v.into_iter().map(|(_, ok)| ok).collect()
        })
        .collect()
}

fn pass_rows(group: &str, results: &[Vec<bool>]) -> Vec<PassRow> {
    let max_k = results.iter().map(Vec::len).min().unwrap_or(0);
    (1..=max_k)
        .filter_map(|k| {
            pass_at_k(results, k).ok().map(|value| PassRow {
                group: group.to_string(),
                k,
                tasks: results.len(),
                value,
            })
        })
        .collect()
}

pub fn report(runs: &[RunSummary]) -> StatsReport {
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.task_type.clone()).or_default().push(r);
    }
    let histograms = groups
        .iter()
        .map(|(g, rs)| (g.clone(), step_histogram(rs.iter().map(|r| r.actions.as_slice()))))
        .collect();
    let mut pass = Vec::new();
    for (g, rs) in &groups {
        pass.extend(pass_rows(g, &outcomes(rs.iter().copied())));
    }
    pass.extend(pass_rows("all", &outcomes(runs.iter())));
    let times: Vec<f64> = runs.iter().map(|r| r.wall_time).collect();
    let costs: Vec<f64> = runs.iter().map(|r| r.cost_usd).collect();
    StatsReport {
        runs: runs.len(),
        histograms,
        cost: cost_breakdown(runs),
        pass_at_k: pass,
        time_cost_correlation: pearson(&times, &costs),
    }
}

impl StatsReport {
    pub fn render_text(&self) -> String {
        let mut out = format!("runs: {}\n", self.runs);
        for (group, hist) in &self.histograms {
            let _ = writeln!(out, "\nstep distribution ({group}):");
            for (step, counts) in hist {
                let cells: Vec<String> = counts.iter().map(|(a, n)| format!("{a}={n}")).collect();
                let _ = writeln!(out, "  step {step:>2}: {}", cells.join(" "));
            }
        }
        out.push_str("\ncost by action:\n");
        for (label, c) in &self.cost {
            let _ = writeln!(
                out,
                "  {label:<14} total ${:.6}  per run ${:.6}  share {:.1}%",
                c.total,
                c.per_run,
                c.share * 100.0
            );
        }
        if !self.pass_at_k.is_empty() {
            out.push_str("\npass@k:\n");
            for row in &self.pass_at_k {
                let _ = writeln!(out, "  {:<20} k={} tasks={} {:.4}", row.group, row.k, row.tasks, row.value);
            }
        }
        match self.time_cost_correlation {
            Some(r) => {
                let _ = writeln!(out, "\nwall time vs cost: pearson r = {r:.4}");
            }
            None => out.push_str("\nwall time vs cost: undefined (fewer than two runs or no variation)\n"),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActionName::*;

    fn run(task: &str, n: usize, resolved: bool, actions: Vec<ActionName>, cost: f64, time: f64) -> RunSummary {
        RunSummary {
            task_id: task.into(),
            task_type: "program-repair".into(),
            run: n,
            resolved: Some(resolved),
            actions,
            cost_by_label: BTreeMap::from([("EditCode".to_string(), cost)]),
            cost_usd: cost,
            wall_time: time,
        }
    }

    #[test]
    fn histogram_counts_positions() {
        let seqs = [
            vec![Reproduction, CodeRetrieval],
            vec![Reproduction],
            vec![Reproduction, EditCode],
            vec![TestRetrieval],
        ];
        let h = step_histogram(seqs.iter().map(Vec::as_slice));
        assert_eq!(h[&1], BTreeMap::from([(Reproduction, 3), (TestRetrieval, 1)]));
        assert_eq!(h[&2], BTreeMap::from([(CodeRetrieval, 1), (EditCode, 1)]));
    }

    #[test]
    fn pearson_degenerate_and_linear() {
        assert_eq!(pearson(&[1.0], &[2.0]), None);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        let r = pearson(&[1.0, 2.0, 4.0], &[3.0, 6.0, 12.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates() {
        let runs = vec![
            run("a", 1, false, vec![Reproduction], 0.01, 1.0),
            run("a", 2, true, vec![Reproduction], 0.02, 2.0),
            run("b", 1, true, vec![TestRetrieval], 0.03, 3.0),
            run("b", 2, true, vec![TestRetrieval], 0.04, 4.0),
        ];
        let rep = report(&runs);
        assert_eq!(rep.cost["EditCode"].share, 1.0);
        let all: Vec<(usize, f64)> = rep.pass_at_k.iter().filter(|r| r.group == "all").map(|r| (r.k, r.value)).collect();
        assert_eq!(all, vec![(1, 0.5), (2, 1.0)]);
        assert!((rep.time_cost_correlation.unwrap() - 1.0).abs() < 1e-9);
        assert!(rep.render_text().contains("step  1: TestRetrieval=2 Reproduction=2"));
    }
}

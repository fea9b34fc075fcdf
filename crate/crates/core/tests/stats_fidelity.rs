use std::collections::BTreeMap;

use use_engine::actions::ActionName::{self, *};
use use_engine::stats::{report, RunSummary};

fn summary(task: &str, actions: Vec<ActionName>, costs: &[(&str, f64)], wall_time: f64) -> RunSummary {
    let cost_by_label: BTreeMap<String, f64> = costs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    RunSummary {
        task_id: task.into(),
        task_type: "program-repair".into(),
        run: 1,
        resolved: Some(true),
        actions,
        cost_usd: cost_by_label.values().sum(),
        cost_by_label,
        wall_time,
    }
}

#[test]
fn constructed_trajectories_give_known_histograms() {
    let runs = vec![
        summary("a", vec![Reproduction, CodeRetrieval, EditCode], &[("EditCode", 0.1)], 1.0),
        summary("b", vec![Reproduction, EditCode], &[("EditCode", 0.2)], 2.0),
        summary("c", vec![Reproduction, CodeRetrieval], &[("EditCode", 0.3)], 3.0),
        summary("d", vec![TestRetrieval], &[("EditCode", 0.4)], 4.0),
    ];
    let rep = report(&runs);
    let h = &rep.histograms["program-repair"];
    assert_eq!(h[&1], BTreeMap::from([(Reproduction, 3), (TestRetrieval, 1)]));
    assert_eq!(h[&2], BTreeMap::from([(CodeRetrieval, 2), (EditCode, 1)]));
    assert_eq!(h[&3], BTreeMap::from([(EditCode, 1)]));
    assert_eq!(rep.cost.len(), 1);
    assert_eq!(rep.cost["EditCode"].share, 1.0);
    assert!((rep.cost["EditCode"].per_run - 0.25).abs() < 1e-12);
}

#[test]
fn linearly_scaled_ledgers_correlate_perfectly() {
    let runs: Vec<RunSummary> = (1..=12)
        .map(|i| {
            let t = i as f64 * 1.7;
            summary(&format!("t{i}"), vec![EditCode], &[("EditCode", 0.003 * t), ("MetaAgent", 0.001 * t)], t)
        })
        .collect();
    let r = report(&runs).time_cost_correlation.unwrap();
    assert!((r - 1.0).abs() < 1e-9, "{r}");
}

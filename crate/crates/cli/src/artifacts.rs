//! Per-run artifact layout: `<out>/<task>/run-<n>/` holding the trajectory,
//! the final diff, the verdict, the usage ledger and a metadata file. Only
//! the metadata file carries timestamps and wall time.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use use_engine::bench::{Metric, RunRecord};
use use_engine::llm::LedgerSnapshot;
use use_engine::meta::{TerminalKind, Trajectory};
use use_engine::stats::RunSummary;

pub const TRAJECTORY: &str = "trajectory.jsonl";
pub const SOLUTION: &str = "solution.diff";
pub const VERDICT: &str = "verdict.json";
pub const LEDGER: &str = "ledger.json";
pub const METADATA: &str = "metadata.json";

pub fn run_dir(out: &Path, task_id: &str, run: usize) -> PathBuf {
    out.join(task_id).join(format!("run-{run}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictFile {
    pub task_id: String,
    pub terminal: TerminalKind,
    pub resolved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(flatten)]
    pub record: RunRecord,
    pub backend: String,
    pub model: String,
    pub engine_version: String,
    pub started_at: String,
    pub finished_at: String,
}

pub struct RunArtifacts<'a> {
    pub trajectory: &'a Trajectory,
    pub solution: &'a str,
    pub verdict: &'a VerdictFile,
    pub ledger: &'a LedgerSnapshot,
    pub metadata: &'a Metadata,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_run(dir: &Path, a: &RunArtifacts<'_>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(TRAJECTORY), a.trajectory.to_jsonl())?;
    fs::write(dir.join(SOLUTION), a.solution)?;
    write_json(&dir.join(VERDICT), a.verdict)?;
    write_json(&dir.join(LEDGER), a.ledger)?;
    write_json(&dir.join(METADATA), a.metadata)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Trajectory::read_jsonl(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Loads every run directory below `root` (any directory holding a
/// metadata file), sorted by task and run number.
pub fn load_summaries(root: &Path) -> Result<Vec<RunSummary>> {
    let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == METADATA)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.sort();
    let mut runs = Vec::new();
    for dir in dirs {
        let meta: Metadata = read_json(&dir.join(METADATA))?;
        let verdict: VerdictFile = read_json(&dir.join(VERDICT))?;
        let ledger: LedgerSnapshot = read_json(&dir.join(LEDGER))?;
        let trajectory = read_trajectory(&dir.join(TRAJECTORY))?;
        runs.push(RunSummary {
            task_id: meta.record.task_id.clone(),
            task_type: meta.record.task_type.to_string(),
            run: meta.record.run,
            resolved: Some(verdict.resolved),
            actions: trajectory.actions(),
            cost_by_label: ledger.by_label.iter().map(|(k, v)| (k.clone(), v.cost_usd)).collect(),
            cost_usd: ledger.totals.cost_usd,
            wall_time: meta.record.wall_time,
        });
    }
    runs.sort_by(|a, b| (&a.task_id, a.run).cmp(&(&b.task_id, b.run)));
    Ok(runs)
}

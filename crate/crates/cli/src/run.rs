//! `use-engine run`.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use use_engine::actions::{ActionEnv, ActionName};
use use_engine::bench::{self, TaskManifest};
use use_engine::knowledge::default_globs;
use use_engine::llm::{DecodeParams, Gateway, LiveBackend, Script, ScriptedBackend, UsageLedger, DEFAULT_MODEL};
use use_engine::meta::{self, Mode, RunConfig, TerminalKind, Workflow, DEFAULT_MAX_ROUNDS};
use use_engine::workspace::Workspace;

use crate::artifacts::{self, Metadata, RunArtifacts, VerdictFile};
use crate::Failure;

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Task manifest, or a directory of `*.toml` manifests.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `live` or `scripted:<script.toml>`.
    #[arg(long, default_value = "live")]
    pub backend: String,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: String,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
    /// Run a fixed workflow (swe, swetry, swt, repocod, repotest, or `auto`
    /// for the task type's default) instead of the dynamic Meta-Agent.
    #[arg(long = "static", value_name = "WORKFLOW")]
    pub static_workflow: Option<String>,
    /// Remove an action from the Meta-Agent's choices; repeatable.
    #[arg(long = "disable-action", value_name = "ACTION")]
    pub disable_action: Vec<String>,
    /// Number of runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Independent runs per task (for pass@k).
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
}

#[derive(Debug, Clone)]
enum Backend {
    Live,
    Scripted { path: PathBuf, script: Script },
}

impl Backend {
    fn parse(spec: &str) -> Result<Self> {
        if spec == "live" {
            return Ok(Backend::Live);
        }
        let Some(path) = spec.strip_prefix("scripted:") else {
            bail!("unknown backend `{spec}`; expected `live` or `scripted:<path>`");
        };
        let path = PathBuf::from(path);
        let script = Script::load(&path)?;
        Ok(Backend::Scripted { path, script })
    }

    fn describe(&self) -> String {
        match self {
            Backend::Live => "live".into(),
            Backend::Scripted { path, .. } => format!("scripted:{}", path.display()),
        }
    }

    fn gateway(&self, model: &str) -> Gateway {
        let ledger = Arc::new(UsageLedger::default());
        match self {
            Backend::Live => Gateway::new(Arc::new(LiveBackend::from_env(model)), ledger, DecodeParams::default()),
            Backend::Scripted { script, .. } => Gateway::new(
                Arc::new(ScriptedBackend::new(script.clone(), model)),
                ledger,
                DecodeParams::default(),
            ),
        }
    }
}

pub fn load_manifests(path: &Path) -> Result<Vec<TaskManifest>> {
    let tasks = if path.is_dir() {
        bench::load_dir(path)?
    } else {
        vec![bench::load_task(path)?]
    };
    if tasks.is_empty() {
        bail!("no task manifests in {}", path.display());
    }
    Ok(tasks)
}

fn config_for(args: &RunArgs, task: &TaskManifest) -> Result<RunConfig> {
    let mut config = RunConfig {
        max_rounds: args.max_rounds,
        solution_kind: task.task_type.solution_kind(),
        ..RunConfig::default()
    };
    for name in &args.disable_action {
        config = config.disable(ActionName::from_str(name).map_err(|e| anyhow!(e))?);
    }
    if let Some(name) = &args.static_workflow {
        let name = if name == "auto" { task.task_type.default_workflow() } else { name.as_str() };
        config.mode = Mode::Static {
            workflow: Workflow::named(name)?,
        };
    }
    config.validate().with_context(|| format!("task {}", task.id))?;
    Ok(config)
}

struct Job {
    task: TaskManifest,
    config: RunConfig,
    run: usize,
}

pub fn cmd_run(args: &RunArgs) -> Result<u8, Failure> {
    let tasks = load_manifests(&args.manifest).map_err(Failure::Usage)?;
    let backend = Backend::parse(&args.backend).map_err(Failure::Usage)?;
    if args.runs == 0 || args.parallel == 0 {
        return Err(Failure::Usage(anyhow!("--runs and --parallel must be positive")));
    }
    let mut jobs = VecDeque::new();
    for task in &tasks {
        let config = config_for(args, task).map_err(Failure::Usage)?;
        for run in 1..=args.runs {
            jobs.push_back(Job {
                task: task.clone(),
                config: config.clone(),
                run,
            });
        }
    }
    let queue = Mutex::new(jobs);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.parallel {
            scope.spawn(|| loop {
                let Some(job) = queue.lock().expect("poisoned").pop_front() else {
                    break;
                };
                match execute(args, &backend, &job) {
                    Ok(line) => println!("{line}"),
                    Err(e) => {
                        eprintln!("{} run {}: {e:#}", job.task.id, job.run);
                        failures.lock().expect("poisoned").push(job.task.id.clone());
                    }
                }
            });
        }
    });
    let failures = failures.into_inner().expect("poisoned");
    if failures.is_empty() {
        Ok(0)
    } else {
        Err(Failure::Engine(anyhow!("{} run(s) ended with an engine error", failures.len())))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// One run: agent, evaluation, artifacts. Returns the console summary line.
fn execute(args: &RunArgs, backend: &Backend, job: &Job) -> Result<String> {
    let task = &job.task;
    let started_at = now();
    let clock = Instant::now();
    let ws = Workspace::open(&task.workspace).context("opening workspace")?;
    let docs = if task.docs.is_empty() { default_globs() } else { task.docs.clone() };
    let env = ActionEnv::new(task.agent_description(), ws, &docs, backend.gateway(&args.model))?;
    let result = meta::run_task(&env, &task.id, &job.config)?;
    let wall_time = clock.elapsed().as_secs_f64();
    drop(env);

    let terminal = result.terminal().clone();
    let verdict = match bench::evaluate(task, &result.solution.diff) {
        Ok(v) => VerdictFile {
            task_id: task.id.clone(),
            terminal: terminal.kind,
            resolved: v.resolved,
            metric: Some(v.metric),
            detail: v.detail,
        },
        Err(e) => VerdictFile {
            task_id: task.id.clone(),
            terminal: terminal.kind,
            resolved: false,
            metric: None,
            detail: format!("evaluation failed: {e}"),
        },
    };
    let metadata = Metadata {
        record: bench::RunRecord {
            task_id: task.id.clone(),
            task_type: task.task_type,
            run: job.run,
            resolved: verdict.resolved,
            metric: verdict.metric.clone(),
            cost_usd: result.ledger.totals.cost_usd,
            wall_time,
        },
        backend: backend.describe(),
        model: args.model.clone(),
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now(),
    };
    let dir = artifacts::run_dir(&args.out_dir, &task.id, job.run);
    artifacts::write_run(
        &dir,
        &RunArtifacts {
            trajectory: &result.trajectory,
            solution: &result.solution.diff,
            verdict: &verdict,
            ledger: &result.ledger,
            metadata: &metadata,
        },
    )?;
    if terminal.kind == TerminalKind::Error {
        bail!(
            "{}; artifacts in {}",
            terminal.message.as_deref().unwrap_or("run ended with an error"),
            dir.display()
        );
    }
    Ok(format!(
        "{} run {}: {} after {} steps ({}), {}, ${:.6}, {:.1}s",
        task.id,
        job.run,
        if verdict.resolved { "resolved" } else { "unresolved" },
        result.trajectory.steps.len(),
        terminal.kind,
        verdict
            .metric
            .as_ref()
            .map(|m| m.to_string())
            .unwrap_or_else(|| "no metric".into()),
        result.ledger.totals.cost_usd,
        wall_time
    ))
}

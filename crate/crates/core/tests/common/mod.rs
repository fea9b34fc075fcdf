#![allow(dead_code)]

use std::path::{Path, PathBuf};

use use_engine::actions::ActionEnv;
use use_engine::bench::{load_task, TaskManifest};
use use_engine::knowledge::default_globs;
use use_engine::llm::{Gateway, Script};
use use_engine::meta::{run_task, RunConfig, RunResult};
use use_engine::workspace::Workspace;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn task(id: &str) -> TaskManifest {
    load_task(&fixtures().join("tasks").join(format!("{id}.toml"))).unwrap()
}

pub fn script(name: &str) -> Script {
    Script::load(&fixtures().join("scripts").join(name)).unwrap()
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap()
}

pub fn env_for(task: &TaskManifest, script: Script) -> ActionEnv {
    let ws = Workspace::open(&task.workspace).unwrap();
    ActionEnv::new(task.agent_description(), ws, &default_globs(), Gateway::scripted(script)).unwrap()
}

pub fn run(task: &TaskManifest, script_name: &str, config: &RunConfig) -> RunResult {
    let env = env_for(task, script(script_name));
    run_task(&env, &task.id, config).unwrap()
}

pub fn config_for(task: &TaskManifest) -> RunConfig {
    RunConfig {
        solution_kind: task.task_type.solution_kind(),
        ..RunConfig::default()
    }
}

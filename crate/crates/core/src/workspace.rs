//! Sandboxed project workspace.
//!
//! A workspace is a private copy of the project tree. The tree captured right
//! after the setup commands is the pristine baseline: diffs are applied on
//! top of it, edits are captured against it, and `reset` restores it.
//! Commands run through a [`CommandDriver`]: either directly on the host
//! (local directory sources) or inside a container with the copy
//! bind-mounted at the image's project root.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Read};
use std::ops::RangeInclusive;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use thiserror::Error;

use crate::diff::{self, HunkFailure, Patch, TextTree};
use crate::state::{BaselineSource, CompositeDiff};

/// Default per-stream capture cap, in characters.
pub const DEFAULT_STREAM_CAP: usize = 10_000;
/// Exit code reported for commands killed on timeout (128 + SIGKILL).
pub const TIMEOUT_EXIT_CODE: i32 = 137;
/// Scratch directory inside the workspace for engine-produced files.
pub const SCRATCH_DIR: &str = ".use-engine";
/// Environment variable naming the container runtime binary.
pub const CONTAINER_RUNTIME_ENV: &str = "USE_ENGINE_CONTAINER_RUNTIME";

const IGNORED_DIRS: &[&str] = &[".git", "__pycache__", ".pytest_cache", SCRATCH_DIR];
const IGNORED_SUFFIXES: &[&str] = &[".pyc", ".pyo"];
const HARD_CAPTURE_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("workspace source not found: {0}")]
    MissingSource(String),
    #[error("setup command `{command}` failed with exit code {}", result.exit_code)]
    Setup { command: String, result: CommandResult },
    #[error("sandbox failure: {0}")]
    Sandbox(String),
    #[error("path `{0}` escapes the project root")]
    PathEscape(String),
    #[error("no such file: {0}")]
    MissingFile(String),
    #[error("invalid workspace spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where the project comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SourceFields", into = "SourceFields")]
pub enum WorkspaceSource {
    Directory { path: PathBuf },
    Container { image: String, project_root: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceFields {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    directory: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    project_root: Option<String>,
}

impl TryFrom<SourceFields> for WorkspaceSource {
    type Error = String;

    fn try_from(raw: SourceFields) -> Result<Self, Self::Error> {
        match (raw.directory, raw.image, raw.project_root) {
            (Some(path), None, None) => Ok(WorkspaceSource::Directory { path }),
            (None, Some(image), Some(project_root)) => Ok(WorkspaceSource::Container { image, project_root }),
            (None, Some(_), None) => Err("container source requires `project_root`".into()),
            _ => Err("source must be exactly one of `directory` or `image` + `project_root`".into()),
        }
    }
}

impl From<WorkspaceSource> for SourceFields {
    fn from(src: WorkspaceSource) -> Self {
        match src {
            WorkspaceSource::Directory { path } => SourceFields {
                directory: Some(path),
                ..Default::default()
            },
            WorkspaceSource::Container { image, project_root } => SourceFields {
                image: Some(image),
                project_root: Some(project_root),
                ..Default::default()
            },
        }
    }
}

fn default_timeout_secs() -> u64 {
    300
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSpec {
    pub source: WorkspaceSource,
    #[serde(default)]
    pub setup_commands: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Seconds.
    #[serde(default = "default_timeout_secs")]
    pub default_timeout: u64,
}

impl WorkspaceSpec {
    pub fn directory(path: impl Into<PathBuf>) -> Self {
        Self {
            source: WorkspaceSource::Directory { path: path.into() },
            setup_commands: Vec::new(),
            env: BTreeMap::new(),
            default_timeout: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), WorkspaceError> {
        if self.default_timeout == 0 {
            return Err(WorkspaceError::InvalidSpec("default_timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Seconds.
    pub duration: f64,
    pub timed_out: bool,
}

impl CommandResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }

    /// stdout followed by stderr.
    pub fn combined_output(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => format!("{}\n{}", self.stdout, self.stderr),
        }
    }
}

/// Content hash of a workspace tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileApplyStatus {
    pub file: String,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub files: Vec<FileApplyStatus>,
    pub failed_hunks: Vec<HunkFailure>,
    pub resulting_fingerprint: Fingerprint,
}

impl ApplyReport {
    pub fn applied(&self) -> bool {
        self.failed_hunks.is_empty()
    }

    pub fn failure_text(&self) -> String {
        self.failed_hunks.iter().map(HunkFailure::to_string).collect::<Vec<_>>().join("\n")
    }
}

impl serde::Serialize for HunkFailure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("HunkFailure", 3)?;
        st.serialize_field("file", &self.file)?;
        st.serialize_field("hunk_header", &self.hunk_header)?;
        st.serialize_field("reason", &self.reason)?;
        st.end()
    }
}

/// Runs shell commands against a workspace copy.
pub trait CommandDriver: Send + Sync {
    fn run(
        &self,
        root: &Path,
        command: &str,
        env: &BTreeMap<String, String>,
        timeout: Duration,
    ) -> Result<RawOutput, WorkspaceError>;

    fn name(&self) -> &'static str;
}

/// Uncapped process output as returned by a driver.
#[derive(Debug, Clone)]
pub struct RawOutput {
    pub exit_code: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration: Duration,
    pub timed_out: bool,
}

/// Runs commands with `sh -c` directly on the host, cwd = workspace copy.
#[derive(Debug, Default)]
pub struct LocalDriver;

impl CommandDriver for LocalDriver {
    fn run(
        &self,
        root: &Path,
        command: &str,
        env: &BTreeMap<String, String>,
        timeout: Duration,
    ) -> Result<RawOutput, WorkspaceError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command).current_dir(root).envs(env);
        spawn_with_timeout(cmd, timeout, || {})
    }

    fn name(&self) -> &'static str {
        "local"
    }
}

/// Runs commands inside a container image, bind-mounting the workspace copy
/// at the image's project root.
#[derive(Debug)]
pub struct ContainerDriver {
    runtime: String,
    image: String,
    project_root: String,
}

static CONTAINER_SEQ: AtomicU64 = AtomicU64::new(0);

impl ContainerDriver {
    pub fn new(image: &str, project_root: &str) -> Self {
        Self {
            runtime: std::env::var(CONTAINER_RUNTIME_ENV).unwrap_or_else(|_| "docker".into()),
            image: image.into(),
            project_root: project_root.into(),
        }
    }

    fn runtime_cmd(&self, args: &[&str]) -> Result<std::process::Output, WorkspaceError> {
        Command::new(&self.runtime)
            .args(args)
            .stdin(Stdio::null())
            .output()
            .map_err(|e| WorkspaceError::Sandbox(format!("cannot invoke `{}`: {e}", self.runtime)))
    }

    /// Copies the image's project root into `dest`.
    fn extract(&self, dest: &Path) -> Result<(), WorkspaceError> {
        let created = self.runtime_cmd(&["create", &self.image])?;
        if !created.status.success() {
            return Err(WorkspaceError::MissingSource(format!(
                "{}: {}",
                self.image,
                String::from_utf8_lossy(&created.stderr).trim()
            )));
        }
        let cid = String::from_utf8_lossy(&created.stdout).trim().to_string();
        let src = format!("{cid}:{}/.", self.project_root.trim_end_matches('/'));
        let copied = self.runtime_cmd(&["cp", &src, &dest.to_string_lossy()]);
        let _ = self.runtime_cmd(&["rm", "-f", &cid]);
        let copied = copied?;
        if !copied.status.success() {
            return Err(WorkspaceError::MissingSource(format!(
                "{}:{}: {}",
                self.image,
                self.project_root,
                String::from_utf8_lossy(&copied.stderr).trim()
            )));
        }
        Ok(())
    }
}

impl CommandDriver for ContainerDriver {
    fn run(
        &self,
        root: &Path,
        command: &str,
        env: &BTreeMap<String, String>,
        timeout: Duration,
    ) -> Result<RawOutput, WorkspaceError> {
        let name = format!(
            "use-engine-{}-{}",
            std::process::id(),
            CONTAINER_SEQ.fetch_add(1, Ordering::Relaxed)
        );
        let mut cmd = Command::new(&self.runtime);
        cmd.args(["run", "--rm", "--name", &name])
            .arg("-v")
            .arg(format!("{}:{}", root.display(), self.project_root))
            .args(["-w", &self.project_root]);
        for (k, v) in env {
            cmd.arg("-e").arg(format!("{k}={v}"));
        }
        cmd.args([self.image.as_str(), "sh", "-c", command]);
        let runtime = self.runtime.clone();
        spawn_with_timeout(cmd, timeout, move || {
            let _ = Command::new(&runtime)
                .args(["kill", &name])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status();
        })
    }

    fn name(&self) -> &'static str {
        "container"
    }
}

fn read_capped(mut reader: impl Read) -> Vec<u8> {
    let mut out = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if out.len() < HARD_CAPTURE_LIMIT {
                    out.extend_from_slice(&buf[..n]);
                }
            }
        }
    }
    out
}

fn spawn_with_timeout(
    mut cmd: Command,
    timeout: Duration,
    on_timeout: impl FnOnce(),
) -> Result<RawOutput, WorkspaceError> {
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| WorkspaceError::Sandbox(format!("spawn failed: {e}")))?;
    let pgid = child.id() as libc::pid_t;
    let stdout = child.stdout.take().map(|s| thread::spawn(move || read_capped(s)));
    let stderr = child.stderr.take().map(|s| thread::spawn(move || read_capped(s)));

    let deadline = start + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            on_timeout();
            // SAFETY: signalling our own child's process group.
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5));
    };
    // Reap stragglers that still hold the pipes open.
    // SAFETY: as above; the group may already be gone.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let stdout = stdout.and_then(|h| h.join().ok()).unwrap_or_default();
    let stderr = stderr.and_then(|h| h.join().ok()).unwrap_or_default();

    use std::os::unix::process::ExitStatusExt;
    let exit_code = if timed_out {
        TIMEOUT_EXIT_CODE
    } else {
        status
            .code()
            .or_else(|| status.signal().map(|s| 128 + s))
            .unwrap_or(-1)
    };
    Ok(RawOutput {
        exit_code,
        stdout,
        stderr,
        duration: start.elapsed(),
        timed_out,
    })
}

/// Caps `text` at `cap` characters, keeping head and tail around a marker.
pub fn cap_stream(text: &str, cap: usize) -> String {
    let total = text.chars().count();
    if total <= cap {
        return text.to_string();
    }
    let marker_for = |n: usize| format!("\n…[truncated {n} chars]…\n");
    let mut keep = cap.saturating_sub(marker_for(total).chars().count());
    // The dropped count shrinks the marker at most by a few digits; recompute once.
    let marker = marker_for(total - keep);
    keep = cap.saturating_sub(marker.chars().count());
    let head = keep / 2;
    let tail = keep - head;
    let head_part: String = text.chars().take(head).collect();
    let tail_part: String = text.chars().skip(total - tail).collect();
    let marker = marker_for(total - keep);
    let mut out = format!("{head_part}{marker}{tail_part}");
    while out.chars().count() > cap {
        out.pop();
    }
    out
}

fn is_ignored(rel: &Path) -> bool {
    rel.components().any(|c| {
        let name = c.as_os_str().to_string_lossy();
        IGNORED_DIRS.contains(&name.as_ref())
    }) || rel
        .file_name()
        .map(|n| {
            let n = n.to_string_lossy();
            IGNORED_SUFFIXES.iter().any(|s| n.ends_with(s))
        })
        .unwrap_or(false)
}

fn rel_string(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Regular files under `root`, keyed by relative path.
fn collect_files(root: &Path, include_ignored: bool) -> Result<BTreeMap<String, PathBuf>, WorkspaceError> {
    let mut files = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| WorkspaceError::Io(io::Error::other(e.to_string())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        if !include_ignored && is_ignored(rel) {
            continue;
        }
        files.insert(rel_string(rel), entry.path().to_path_buf());
    }
    Ok(files)
}

fn copy_tree(src: &Path, dest: &Path) -> Result<(), WorkspaceError> {
    for entry in walkdir::WalkDir::new(src).follow_links(false) {
        let entry = entry.map_err(|e| WorkspaceError::Io(io::Error::other(e.to_string())))?;
        let rel = entry.path().strip_prefix(src).unwrap_or(entry.path());
        if rel.components().any(|c| c.as_os_str() == ".git") {
            continue;
        }
        let target = dest.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target)?;
        } else if ft.is_file() {
            fs::copy(entry.path(), &target)?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path())?;
            std::os::unix::fs::symlink(link, &target)?;
        }
    }
    Ok(())
}

fn fingerprint_of(files: &BTreeMap<String, Vec<u8>>) -> Fingerprint {
    let mut hasher = Sha256::new();
    for (path, bytes) in files {
        hasher.update(path.as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    Fingerprint(format!("{:x}", hasher.finalize()))
}

fn to_text_tree(files: &BTreeMap<String, Vec<u8>>) -> TextTree {
    files
        .iter()
        .filter_map(|(p, b)| String::from_utf8(b.clone()).ok().map(|s| (p.clone(), s)))
        .collect()
}

pub struct Workspace {
    dir: TempDir,
    root: PathBuf,
    driver: Box<dyn CommandDriver>,
    env: BTreeMap<String, String>,
    default_timeout: Duration,
    stream_cap: usize,
    baseline: BTreeMap<String, Vec<u8>>,
    baseline_dirs: BTreeSet<String>,
    baseline_fingerprint: Fingerprint,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("root", &self.root)
            .field("driver", &self.driver.name())
            .field("baseline_fingerprint", &self.baseline_fingerprint)
            .finish()
    }
}

impl Workspace {
    /// Copies the source, runs setup commands in order, and captures the
    /// pristine baseline.
    pub fn open(spec: &WorkspaceSpec) -> Result<Self, WorkspaceError> {
        spec.validate()?;
        let dir = tempfile::Builder::new().prefix("use-engine-ws-").tempdir()?;
        let root = dir.path().join("project");
        fs::create_dir_all(&root)?;
        let driver: Box<dyn CommandDriver> = match &spec.source {
            WorkspaceSource::Directory { path } => {
                if !path.is_dir() {
                    return Err(WorkspaceError::MissingSource(path.display().to_string()));
                }
                copy_tree(path, &root)?;
                Box::new(LocalDriver)
            }
            WorkspaceSource::Container { image, project_root } => {
                let driver = ContainerDriver::new(image, project_root);
                driver.extract(&root)?;
                Box::new(driver)
            }
        };
        let mut ws = Workspace {
            dir,
            root,
            driver,
            env: spec.env.clone(),
            default_timeout: Duration::from_secs(spec.default_timeout),
            stream_cap: DEFAULT_STREAM_CAP,
            baseline: BTreeMap::new(),
            baseline_dirs: BTreeSet::new(),
            baseline_fingerprint: Fingerprint(String::new()),
        };
        for command in &spec.setup_commands {
            let result = ws.run_command(command, None)?;
            if !result.success() {
                return Err(WorkspaceError::Setup {
                    command: command.clone(),
                    result,
                });
            }
        }
        ws.capture_baseline()?;
        Ok(ws)
    }

    fn capture_baseline(&mut self) -> Result<(), WorkspaceError> {
        let mut baseline = BTreeMap::new();
        for (rel, path) in collect_files(&self.root, false)? {
            baseline.insert(rel, fs::read(path)?);
        }
        let mut dirs = BTreeSet::new();
        for entry in walkdir::WalkDir::new(&self.root).min_depth(1) {
            let entry = entry.map_err(|e| WorkspaceError::Io(io::Error::other(e.to_string())))?;
            if entry.file_type().is_dir() {
                let rel = entry.path().strip_prefix(&self.root).unwrap_or(entry.path());
                dirs.insert(rel_string(rel));
            }
        }
        self.baseline_fingerprint = fingerprint_of(&baseline);
        self.baseline = baseline;
        self.baseline_dirs = dirs;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn driver_name(&self) -> &'static str {
        self.driver.name()
    }

    pub fn default_timeout(&self) -> Duration {
        self.default_timeout
    }

    pub fn set_stream_cap(&mut self, cap: usize) {
        self.stream_cap = cap.max(1);
    }

    pub fn baseline_fingerprint(&self) -> &Fingerprint {
        &self.baseline_fingerprint
    }

    pub fn baseline_tree(&self) -> TextTree {
        to_text_tree(&self.baseline)
    }

    fn current_files(&self) -> Result<BTreeMap<String, Vec<u8>>, WorkspaceError> {
        let mut files = BTreeMap::new();
        for (rel, path) in collect_files(&self.root, false)? {
            files.insert(rel, fs::read(path)?);
        }
        Ok(files)
    }

    pub fn fingerprint(&self) -> Result<Fingerprint, WorkspaceError> {
        Ok(fingerprint_of(&self.current_files()?))
    }

    pub fn is_pristine(&self) -> Result<bool, WorkspaceError> {
        Ok(self.fingerprint()? == self.baseline_fingerprint)
    }

    /// Current UTF-8 files (binary files are skipped).
    pub fn text_tree(&self) -> Result<TextTree, WorkspaceError> {
        Ok(to_text_tree(&self.current_files()?))
    }

    /// Runs `command` with cwd = project root. `timeout` defaults to the
    /// spec's. Streams are capped; the sandbox path is shown as `.`.
    pub fn run_command(&self, command: &str, timeout: Option<Duration>) -> Result<CommandResult, WorkspaceError> {
        let timeout = timeout.unwrap_or(self.default_timeout);
        let raw = self.driver.run(&self.root, command, &self.env, timeout)?;
        let root = self.root.to_string_lossy().into_owned();
        let clean = |bytes: &[u8]| {
            let text = String::from_utf8_lossy(bytes).replace(&root, ".");
            cap_stream(&text, self.stream_cap)
        };
        Ok(CommandResult {
            exit_code: raw.exit_code,
            stdout: clean(&raw.stdout),
            stderr: clean(&raw.stderr),
            duration: raw.duration.as_secs_f64(),
            timed_out: raw.timed_out,
        })
    }

    /// Resolves a workspace-relative path, rejecting escapes.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, WorkspaceError> {
        diff::validate_relative_path(rel).map_err(|_| WorkspaceError::PathEscape(rel.to_string()))?;
        let path = self.root.join(rel);
        if let Ok(canonical) = path.canonicalize() {
            let root = self.root.canonicalize()?;
            if !canonical.starts_with(&root) {
                return Err(WorkspaceError::PathEscape(rel.to_string()));
            }
        }
        Ok(path)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.resolve(rel).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Exact file content, or the selected 1-based inclusive line range.
    pub fn read_file(&self, rel: &str, lines: Option<RangeInclusive<usize>>) -> Result<String, WorkspaceError> {
        let path = self.resolve(rel)?;
        if !path.is_file() {
            return Err(WorkspaceError::MissingFile(rel.to_string()));
        }
        let text = String::from_utf8_lossy(&fs::read(&path)?).into_owned();
        Ok(match lines {
            None => text,
            Some(range) => text
                .split_inclusive('\n')
                .enumerate()
                .filter(|(i, _)| range.contains(&(i + 1)))
                .map(|(_, l)| l)
                .collect(),
        })
    }

    pub fn write_file(&self, rel: &str, content: &str) -> Result<(), WorkspaceError> {
        let path = self.resolve(rel)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, content)?;
        Ok(())
    }

    pub fn remove_file(&self, rel: &str) -> Result<(), WorkspaceError> {
        let path = self.resolve(rel)?;
        if path.is_file() {
            fs::remove_file(path)?;
        }
        Ok(())
    }

    /// Restores the pristine baseline.
    pub fn reset(&self) -> Result<(), WorkspaceError> {
        let present = collect_files(&self.root, true)?;
        for (rel, path) in &present {
            let keep = self.baseline.get(rel).is_some_and(|b| fs::read(path).ok().as_deref() == Some(b.as_slice()));
            if !keep && !self.baseline.contains_key(rel) {
                fs::remove_file(path)?;
            }
        }
        for (rel, bytes) in &self.baseline {
            let path = self.root.join(rel);
            if fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&path, bytes)?;
            }
        }
        // Remove directories created since the baseline, deepest first.
        let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(&self.root)
            .min_depth(1)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_dir())
            .map(|e| e.path().to_path_buf())
            .collect();
        dirs.sort_by_key(|d| std::cmp::Reverse(d.components().count()));
        for dir in dirs {
            let rel = rel_string(dir.strip_prefix(&self.root).unwrap_or(&dir));
            if !self.baseline_dirs.contains(&rel) {
                let _ = fs::remove_dir_all(&dir);
            }
        }
        Ok(())
    }

    /// Resets, then applies the composite. On any hunk failure the
    /// workspace is rolled back to the baseline.
    pub fn apply_diffs(&self, composite: &CompositeDiff) -> Result<ApplyReport, WorkspaceError> {
        self.apply_patch(&composite.patch)
    }

    pub fn apply_patch(&self, patch: &Patch) -> Result<ApplyReport, WorkspaceError> {
        self.reset()?;
        let mut tree = self.text_tree()?;
        let mut files = Vec::new();
        let mut failed_hunks = Vec::new();
        let mut staged: Vec<(String, Option<String>)> = Vec::new();
        for fp in &patch.files {
            let source = fp.old_path.as_ref().and_then(|p| tree.get(p)).cloned();
            match diff::apply_file_patch(source.as_deref(), fp) {
                Ok(result) => {
                    if let Some(old) = &fp.old_path {
                        if fp.new_path.as_ref() != Some(old) {
                            tree.remove(old);
                            staged.push((old.clone(), None));
                        }
                    }
                    let target = fp.path().to_string();
                    match &result {
                        Some(body) => tree.insert(target.clone(), body.clone()),
                        None => tree.remove(&target),
                    };
                    staged.push((target.clone(), result));
                    files.push(FileApplyStatus {
                        file: target,
                        applied: true,
                    });
                }
                Err(mut failures) => {
                    files.push(FileApplyStatus {
                        file: fp.path().to_string(),
                        applied: false,
                    });
                    failed_hunks.append(&mut failures);
                }
            }
        }
        if !failed_hunks.is_empty() {
            return Ok(ApplyReport {
                files,
                failed_hunks,
                resulting_fingerprint: self.baseline_fingerprint.clone(),
            });
        }
        for (path, content) in staged {
            match content {
                Some(body) => self.write_file(&path, &body)?,
                None => self.remove_file(&path)?,
            }
        }
        Ok(ApplyReport {
            files,
            failed_hunks,
            resulting_fingerprint: self.fingerprint()?,
        })
    }

    /// Unified diff of the current tree against the baseline.
    pub fn snapshot_diff(&self) -> Result<Patch, WorkspaceError> {
        Ok(diff::diff_trees(&self.baseline_tree(), &self.text_tree()?))
    }

    /// Keeps the temporary directory alive for the lifetime of the workspace.
    pub fn sandbox_dir(&self) -> &Path {
        self.dir.path()
    }
}

impl BaselineSource for Workspace {
    fn baseline_text(&self, path: &str) -> Option<String> {
        self.baseline.get(path).and_then(|b| String::from_utf8(b.clone()).ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> TempDir {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("pkg")).unwrap();
        fs::write(root.join("pkg/mod.py"), "def f():\n    return 1\n\n\ndef g():\n    return 2\n").unwrap();
        fs::write(root.join("notes.txt"), "l1\nl2\nl3\nl4\nl5\nl6\n").unwrap();
        dir
    }

    fn open(dir: &TempDir) -> Workspace {
        Workspace::open(&WorkspaceSpec::directory(dir.path())).unwrap()
    }

    #[test]
    fn fingerprint_stable_across_opens() {
        let dir = fixture();
        assert_eq!(open(&dir).baseline_fingerprint(), open(&dir).baseline_fingerprint());
    }

    #[test]
    fn missing_source_is_reported() {
        let err = Workspace::open(&WorkspaceSpec::directory("/nonexistent/project")).unwrap_err();
        assert!(matches!(err, WorkspaceError::MissingSource(_)));
    }

    #[test]
    fn failing_setup_names_command() {
        let dir = fixture();
        let mut spec = WorkspaceSpec::directory(dir.path());
        spec.setup_commands = vec!["true".into(), "exit 1".into()];
        match Workspace::open(&spec).unwrap_err() {
            WorkspaceError::Setup { command, result } => {
                assert_eq!(command, "exit 1");
                assert_eq!(result.exit_code, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn setup_output_is_part_of_baseline() {
        let dir = fixture();
        let mut spec = WorkspaceSpec::directory(dir.path());
        spec.setup_commands = vec!["echo generated > gen.txt".into()];
        let ws = Workspace::open(&spec).unwrap();
        assert!(ws.is_pristine().unwrap());
        assert_eq!(ws.read_file("gen.txt", None).unwrap(), "generated\n");
    }

    #[test]
    fn run_command_basics() {
        let dir = fixture();
        let mut spec = WorkspaceSpec::directory(dir.path());
        spec.env.insert("GREETING".into(), "hi there".into());
        let ws = Workspace::open(&spec).unwrap();
        assert_eq!(ws.run_command("true", None).unwrap().exit_code, 0);
        assert_eq!(ws.run_command("exit 3", None).unwrap().exit_code, 3);
        let out = ws.run_command("echo \"$GREETING\"; ls pkg; echo err >&2", None).unwrap();
        assert_eq!(out.stdout, "hi there\nmod.py\n");
        assert_eq!(out.stderr, "err\n");
        let pwd = ws.run_command("pwd", None).unwrap();
        assert_eq!(pwd.stdout.trim(), ".");
    }

    #[test]
    fn timeout_kills_command() {
        let dir = fixture();
        let ws = open(&dir);
        let res = ws.run_command("sleep 10", Some(Duration::from_secs(1))).unwrap();
        assert!(res.timed_out);
        assert_eq!(res.exit_code, TIMEOUT_EXIT_CODE);
        assert!(res.duration < 2.0, "took {}", res.duration);
    }

    #[test]
    fn large_output_is_capped() {
        let dir = fixture();
        let ws = open(&dir);
        let res = ws
            .run_command("python3 -c \"print('x' * 1000000)\"", None)
            .unwrap();
        assert!(res.stdout.chars().count() <= DEFAULT_STREAM_CAP);
        assert!(res.stdout.contains("…[truncated"));
        assert!(res.stdout.starts_with("xxx") && res.stdout.ends_with("x\n"));
    }

    #[test]
    fn cap_stream_bounds() {
        let text = "a".repeat(500);
        for cap in [50, 100, 499] {
            let out = cap_stream(&text, cap);
            assert!(out.chars().count() <= cap);
            assert!(out.contains("truncated"));
        }
        assert_eq!(cap_stream("short", 10), "short");
    }

    #[test]
    fn read_file_rules() {
        let dir = fixture();
        let ws = open(&dir);
        assert_eq!(ws.read_file("notes.txt", None).unwrap(), "l1\nl2\nl3\nl4\nl5\nl6\n");
        assert_eq!(ws.read_file("notes.txt", Some(3..=5)).unwrap(), "l3\nl4\nl5\n");
        assert!(matches!(ws.read_file("../etc/passwd", None), Err(WorkspaceError::PathEscape(_))));
        assert!(matches!(ws.read_file("/etc/passwd", None), Err(WorkspaceError::PathEscape(_))));
        assert!(matches!(ws.read_file("nope.txt", None), Err(WorkspaceError::MissingFile(_))));
    }

    #[test]
    fn symlink_escape_is_rejected() {
        let dir = fixture();
        std::os::unix::fs::symlink("/etc", dir.path().join("etc_link")).unwrap();
        let ws = open(&dir);
        assert!(matches!(ws.read_file("etc_link/hostname", None), Err(WorkspaceError::PathEscape(_))));
    }

    #[test]
    fn apply_snapshot_reset_cycle() {
        let dir = fixture();
        let ws = open(&dir);
        assert!(ws.snapshot_diff().unwrap().is_empty());

        let report = ws.apply_patch(&Patch::empty()).unwrap();
        assert_eq!(&report.resulting_fingerprint, ws.baseline_fingerprint());

        let text = "--- a/pkg/mod.py\n+++ b/pkg/mod.py\n@@ -1,2 +1,2 @@\n def f():\n-    return 1\n+    return 10\n";
        let patch = Patch::parse(text).unwrap();
        let report = ws.apply_patch(&patch).unwrap();
        assert!(report.applied());
        assert_ne!(&report.resulting_fingerprint, ws.baseline_fingerprint());
        assert_eq!(ws.read_file("pkg/mod.py", Some(2..=2)).unwrap(), "    return 10\n");

        let snap = ws.snapshot_diff().unwrap();
        let mut expected_tree = ws.baseline_tree();
        diff::apply_to_tree(&mut expected_tree, &patch).unwrap();
        assert_eq!(snap, diff::diff_trees(&ws.baseline_tree(), &expected_tree));

        ws.reset().unwrap();
        assert!(ws.snapshot_diff().unwrap().is_empty());
        ws.reset().unwrap();
        assert!(ws.is_pristine().unwrap());
    }

    #[test]
    fn stale_diff_rolls_back() {
        let dir = fixture();
        let ws = open(&dir);
        ws.write_file("scratch.txt", "junk").unwrap();
        let text = "--- a/pkg/mod.py\n+++ b/pkg/mod.py\n@@ -1,2 +1,2 @@\n def f():\n-    return 99\n+    return 10\n--- a/notes.txt\n+++ b/notes.txt\n@@ -1,2 +1,2 @@\n-l1\n+L1\n l2\n";
        let report = ws.apply_patch(&Patch::parse(text).unwrap()).unwrap();
        assert!(!report.applied());
        assert_eq!(report.failed_hunks.len(), 1);
        assert_eq!(report.failed_hunks[0].file, "pkg/mod.py");
        assert_eq!(report.failed_hunks[0].hunk_header, "@@ -1,2 +1,2 @@");
        assert_eq!(&ws.fingerprint().unwrap(), ws.baseline_fingerprint());
        assert!(!ws.exists("scratch.txt"));
    }

    #[test]
    fn direct_write_shows_in_snapshot() {
        let dir = fixture();
        let ws = open(&dir);
        ws.write_file("notes.txt", "l1\nl2\nl3\nCHANGED\nl5\nl6\n").unwrap();
        ws.write_file("new/dir/file.py", "x = 1\n").unwrap();
        let snap = ws.snapshot_diff().unwrap().render();
        assert_eq!(
            snap,
            "--- /dev/null\n+++ b/new/dir/file.py\n@@ -0,0 +1,1 @@\n+x = 1\n\
             --- a/notes.txt\n+++ b/notes.txt\n@@ -1,6 +1,6 @@\n l1\n l2\n l3\n-l4\n+CHANGED\n l5\n l6\n"
        );
        ws.reset().unwrap();
        assert!(!ws.root().join("new").exists());
        assert!(ws.is_pristine().unwrap());
    }

    #[test]
    fn caches_do_not_affect_fingerprint_but_are_reset() {
        let dir = fixture();
        let ws = open(&dir);
        ws.run_command("mkdir -p pkg/__pycache__ && echo x > pkg/__pycache__/mod.pyc", None)
            .unwrap();
        assert!(ws.is_pristine().unwrap());
        ws.reset().unwrap();
        assert!(!ws.root().join("pkg/__pycache__").exists());
    }

    #[test]
    fn spec_source_variants() {
        let dir: WorkspaceSpec = toml::from_str("source = { directory = \"p\" }\n").unwrap();
        assert_eq!(dir.source, WorkspaceSource::Directory { path: "p".into() });
        assert_eq!(dir.default_timeout, 300);
        let img: WorkspaceSpec =
            toml::from_str("source = { image = \"img:1\", project_root = \"/testbed\" }\ndefault_timeout = 9\n").unwrap();
        assert!(matches!(img.source, WorkspaceSource::Container { .. }));
        assert!(toml::from_str::<WorkspaceSpec>("source = { directory = \"p\", image = \"i\" }\n").is_err());
        assert!(toml::from_str::<WorkspaceSpec>("source = { image = \"i\" }\n").is_err());
        let zero: WorkspaceSpec = toml::from_str("source = { directory = \"p\" }\ndefault_timeout = 0\n").unwrap();
        assert!(zero.validate().is_err());
    }
}

//! Long-term memory over project documentation.
//!
//! Documentation files are chunked with overlap and ranked lexically (BM25)
//! by default; an HTTP embedding scorer can be swapped in. The store is the
//! source for inferring the project's test command.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::diff::TextTree;
use crate::llm::{ChatMessage, FieldSpec, FieldType, Gateway, Schema};
use crate::workspace::{Workspace, WorkspaceError};

pub const CHUNK_SIZE: usize = 1000;
pub const CHUNK_OVERLAP: usize = 200;
pub const TESTS_PLACEHOLDER: &str = "{tests}";
const COMMAND_CONTEXT_CHUNKS: usize = 5;
const COMMAND_QUERY: &str = "how to run the test suite tests test command pytest make check tox";

pub const DEFAULT_DOC_GLOBS: &[&str] = &[
    "README*",
    "**/README*",
    "CONTRIBUTING*",
    "HACKING*",
    "DEVELOPMENT*",
    "TESTING*",
    "docs/**",
    "doc/**",
    "Makefile",
    "makefile",
    "justfile",
    "tox.ini",
    "noxfile.py",
    "setup.cfg",
    "pyproject.toml",
    "pytest.ini",
    "Cargo.toml",
    "package.json",
    ".github/workflows/*",
    ".travis.yml",
    ".gitlab-ci.yml",
    ".circleci/config.yml",
    "azure-pipelines.yml",
];

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("invalid documentation glob `{glob}`: {message}")]
    Glob { glob: String, message: String },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("embedding endpoint failed: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub file: String,
    /// Character offsets `[start, end)` into the file.
    pub span: (usize, usize),
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
}

/// Assigns a relevance score to every chunk for a query.
pub trait Scorer: Send + Sync {
    fn scores(&self, query: &str, chunks: &[Chunk]) -> Result<Vec<f64>, KnowledgeError>;
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over chunk tokens.
#[derive(Debug, Clone, Copy)]
pub struct Bm25 {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25 {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Scorer for Bm25 {
    fn scores(&self, query: &str, chunks: &[Chunk]) -> Result<Vec<f64>, KnowledgeError> {
        let docs: Vec<Vec<String>> = chunks.iter().map(|c| tokenize(&c.text)).collect();
        let n = docs.len() as f64;
        if docs.is_empty() {
            return Ok(Vec::new());
        }
        let avg_len = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        let df: HashMap<&str, f64> = terms
            .iter()
            .map(|t| (t.as_str(), docs.iter().filter(|d| d.contains(t)).count() as f64))
            .collect();
        Ok(docs
            .iter()
            .map(|doc| {
                let len = doc.len() as f64;
                terms
                    .iter()
                    .map(|t| {
                        let tf = doc.iter().filter(|w| *w == t).count() as f64;
                        if tf == 0.0 {
                            return 0.0;
                        }
                        let df = df[t.as_str()];
                        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                        let norm = if avg_len > 0.0 { len / avg_len } else { 1.0 };
                        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
                    })
                    .sum()
            })
            .collect())
    }
}

/// Cosine similarity over embeddings from an OpenAI-style `/embeddings`
/// endpoint.
#[derive(Debug)]
pub struct EmbeddingScorer {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl EmbeddingScorer {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }

    fn embed(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>, KnowledgeError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp: Value = req
            .send_json(serde_json::json!({ "model": self.model, "input": inputs }))
            .map_err(|e| KnowledgeError::Embedding(e.to_string()))?
            .into_json()
            .map_err(|e| KnowledgeError::Embedding(e.to_string()))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| KnowledgeError::Embedding("response without `data`".into()))?;
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .map(|v| v.iter().filter_map(Value::as_f64).collect())
                    .ok_or_else(|| KnowledgeError::Embedding("item without `embedding`".into()))
            })
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl Scorer for EmbeddingScorer {
    fn scores(&self, query: &str, chunks: &[Chunk]) -> Result<Vec<f64>, KnowledgeError> {
        if chunks.is_empty() {
            return Ok(Vec::new());
        }
        let mut inputs: Vec<&str> = vec![query];
        inputs.extend(chunks.iter().map(|c| c.text.as_str()));
        let vectors = self.embed(&inputs)?;
        if vectors.len() != inputs.len() {
            return Err(KnowledgeError::Embedding("embedding count mismatch".into()));
        }
        Ok(vectors[1..].iter().map(|v| cosine(&vectors[0], v)).collect())
    }
}

/// Splits `text` into windows of `size` characters overlapping by `overlap`.
pub fn chunk_text(file: &str, text: &str, size: usize, overlap: usize) -> Vec<Chunk> {
    let chars: Vec<char> = text.chars().collect();
    let step = size.saturating_sub(overlap).max(1);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let end = (start + size).min(chars.len());
        chunks.push(Chunk {
            file: file.to_string(),
            span: (start, end),
            text: chars[start..end].iter().collect(),
        });
        if end == chars.len() {
            break;
        }
        start += step;
    }
    chunks
}

pub fn build_globset(globs: &[String]) -> Result<GlobSet, KnowledgeError> {
    let mut builder = GlobSetBuilder::new();
    for g in globs {
        let glob = GlobBuilder::new(g)
            .case_insensitive(true)
            .literal_separator(true)
            .build()
            .map_err(|e| KnowledgeError::Glob {
                glob: g.clone(),
                message: e.to_string(),
            })?;
        builder.add(glob);
    }
    builder.build().map_err(|e| KnowledgeError::Glob {
        glob: globs.join(", "),
        message: e.to_string(),
    })
}

pub fn default_globs() -> Vec<String> {
    DEFAULT_DOC_GLOBS.iter().map(|s| s.to_string()).collect()
}

/// Immutable after ingestion.
pub struct DocStore {
    chunks: Vec<Chunk>,
    scorer: Box<dyn Scorer>,
}

impl std::fmt::Debug for DocStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DocStore").field("chunks", &self.chunks.len()).finish()
    }
}

impl DocStore {
    pub fn ingest(ws: &Workspace, globs: &[String]) -> Result<Self, KnowledgeError> {
        Self::ingest_tree(&ws.text_tree()?, globs)
    }

    pub fn ingest_tree(tree: &TextTree, globs: &[String]) -> Result<Self, KnowledgeError> {
        let set = build_globset(globs)?;
        let chunks = tree
            .iter()
            .filter(|(path, _)| set.is_match(path.as_str()))
            .flat_map(|(path, text)| chunk_text(path, text, CHUNK_SIZE, CHUNK_OVERLAP))
            .collect();
        Ok(Self {
            chunks,
            scorer: Box::new(Bm25::default()),
        })
    }

    pub fn with_scorer(mut self, scorer: Box<dyn Scorer>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Top `k` chunks with a positive score, ties broken by (file, span).
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredChunk>, KnowledgeError> {
        let scores = self.scorer.scores(query, &self.chunks)?;
        let mut ranked: Vec<ScoredChunk> = self
            .chunks
            .iter()
            .zip(scores)
            .filter(|(_, s)| *s > 0.0)
            .map(|(c, score)| ScoredChunk { chunk: c.clone(), score })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.chunk.file.cmp(&b.chunk.file))
                .then_with(|| a.chunk.span.cmp(&b.chunk.span))
        });
        ranked.truncate(k.max(1));
        Ok(ranked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Pytest,
    Unittest,
    Cargo,
}

impl Framework {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "pytest" => Some(Framework::Pytest),
            "unittest" => Some(Framework::Unittest),
            "cargo" => Some(Framework::Cargo),
            _ => None,
        }
    }

    pub fn default_template(self) -> &'static str {
        match self {
            Framework::Pytest => "python3 -m pytest -q -p no:cacheprovider {tests}",
            Framework::Unittest => "python3 -m unittest -v {tests}",
            Framework::Cargo => "cargo test {tests}",
        }
    }

    /// Most common hint among test files; pytest when nothing is known.
    pub fn detect<'a>(hints: impl IntoIterator<Item = &'a str>, tree_has_cargo: bool) -> Self {
        let mut counts: BTreeMap<Framework, usize> = BTreeMap::new();
        for h in hints {
            if let Some(f) = Framework::parse(h) {
                *counts.entry(f).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(f, _)| f)
            .unwrap_or(if tree_has_cargo { Framework::Cargo } else { Framework::Pytest })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CommandSource {
    Documentation,
    Fallback { framework: Framework, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCommand {
    /// Shell command; `{tests}` is replaced by the quoted test files.
    pub template: String,
    pub source: CommandSource,
}

impl TestCommand {
    pub fn fallback(framework: Framework, reason: impl Into<String>) -> Self {
        Self {
            template: framework.default_template().to_string(),
            source: CommandSource::Fallback {
                framework,
                reason: reason.into(),
            },
        }
    }

    /// Without a placeholder the template runs as-is.
    pub fn render(&self, tests: &[String]) -> String {
        if !self.template.contains(TESTS_PLACEHOLDER) {
            return self.template.clone();
        }
        let quoted = shlex::try_join(tests.iter().map(String::as_str)).unwrap_or_else(|_| tests.join(" "));
        self.template.replace(TESTS_PLACEHOLDER, &quoted).trim_end().to_string()
    }
}

pub struct CommandContext<'a> {
    /// Metering label of the calling action.
    pub label: &'a str,
    pub task: &'a str,
    pub target_files: &'a [String],
    pub framework: Framework,
}

fn valid_command(cmd: &str) -> Result<(), String> {
    let cmd = cmd.trim();
    if cmd.is_empty() {
        return Err("empty command".into());
    }
    if cmd.contains('\n') || cmd.contains("```") {
        return Err("command must be a single shell line".into());
    }
    shlex::split(cmd).map(|_| ()).ok_or_else(|| "command is not valid shell syntax".into())
}

/// Asks the backend for the project's test command using retrieved doc
/// chunks; falls back to the framework's default runner. Never fails.
pub fn infer_test_command(store: &DocStore, gateway: &Gateway, ctx: &CommandContext<'_>) -> TestCommand {
    let chunks = match store.retrieve(COMMAND_QUERY, COMMAND_CONTEXT_CHUNKS) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("documentation retrieval failed: {e}");
            Vec::new()
        }
    };
    if chunks.is_empty() {
        return TestCommand::fallback(ctx.framework, "no documentation mentions how to run tests");
    }
    let mut prompt = String::from(
        "Determine the shell command that runs this project's tests, based only on the documentation excerpts below.\n\
         Use `{tests}` where test file paths should be inserted, if the command accepts them.\n\
         If the documentation does not say, reply with an empty command.\n\n",
    );
    prompt.push_str(&format!("Task:\n{}\n\n", ctx.task));
    if !ctx.target_files.is_empty() {
        prompt.push_str(&format!("Relevant test files: {}\n\n", ctx.target_files.join(", ")));
    }
    for sc in &chunks {
        prompt.push_str(&format!(
            "--- {} (chars {}-{})\n{}\n",
            sc.chunk.file, sc.chunk.span.0, sc.chunk.span.1, sc.chunk.text
        ));
    }
    let schema = Schema::Object(vec![FieldSpec::required(
        "command",
        FieldType::String,
        "the shell command, or an empty string",
    )]);
    prompt.push('\n');
    prompt.push_str(&schema.describe());
    let reply = gateway.select_structured(ctx.label, &[ChatMessage::user(prompt)], &schema);
    match reply {
        Ok(v) => {
            let cmd = v["command"].as_str().unwrap_or("").trim().to_string();
            match valid_command(&cmd) {
                Ok(()) => TestCommand {
                    template: cmd,
                    source: CommandSource::Documentation,
                },
                Err(why) => {
                    log::warn!("inferred test command rejected ({why}); using {:?} default", ctx.framework);
                    TestCommand::fallback(ctx.framework, format!("inferred command rejected: {why}"))
                }
            }
        }
        Err(e) => {
            log::warn!("test command inference failed ({e}); using {:?} default", ctx.framework);
            TestCommand::fallback(ctx.framework, format!("inference failed: {e}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Script, ScriptedReply};
    use serde_json::json;

    fn tree(files: &[(&str, &str)]) -> TextTree {
        files.iter().map(|(p, t)| (p.to_string(), t.to_string())).collect()
    }

    #[test]
    fn readme_only_yields_chunks() {
        let store = DocStore::ingest_tree(
            &tree(&[("README.md", "Run the tests with make check."), ("src/a.py", "x = 1")]),
            &default_globs(),
        )
        .unwrap();
        assert_eq!(store.chunks().len(), 1);
        assert_eq!(store.chunks()[0].file, "README.md");
    }

    #[test]
    fn no_docs_means_empty_store() {
        let store = DocStore::ingest_tree(&tree(&[("src/a.py", "x = 1")]), &default_globs()).unwrap();
        assert!(store.is_empty());
        assert!(store.retrieve("anything", 3).unwrap().is_empty());
    }

    #[test]
    fn glob_matching_rules() {
        let set = build_globset(&default_globs()).unwrap();
        for p in ["README.md", "readme.rst", "pkg/README.txt", "docs/guide/intro.md", ".github/workflows/ci.yml", "tox.ini"] {
            assert!(set.is_match(p), "{p}");
        }
        for p in ["src/main.py", "tests/test_a.py", "docsx/a.md"] {
            assert!(!set.is_match(p), "{p}");
        }
        assert!(build_globset(&["[".to_string()]).is_err());
    }

    #[test]
    fn chunks_reconstruct_source() {
        let text: String = (0..10_240).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let chunks = chunk_text("docs/big.md", &text, CHUNK_SIZE, CHUNK_OVERLAP);
        assert!(chunks.iter().all(|c| c.text.chars().count() <= CHUNK_SIZE));
        let mut rebuilt = chunks[0].text.clone();
        for pair in chunks.windows(2) {
            assert_eq!(pair[1].span.0, pair[0].span.1 - CHUNK_OVERLAP);
            rebuilt.extend(pair[1].text.chars().skip(CHUNK_OVERLAP));
        }
        assert_eq!(rebuilt, text);
        assert_eq!(chunks.last().unwrap().span.1, text.chars().count());
    }

    #[test]
    fn unique_term_ranks_first_and_ties_are_ordered() {
        let store = DocStore::ingest_tree(
            &tree(&[
                ("docs/b.md", "install the package"),
                ("docs/a.md", "install the package"),
                ("README.md", "use tox to run the zebra checks"),
            ]),
            &default_globs(),
        )
        .unwrap();
        let top = store.retrieve("zebra", 2).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].chunk.file, "README.md");
        let tied = store.retrieve("package", 5).unwrap();
        assert_eq!(tied[0].chunk.file, "docs/a.md");
        assert_eq!(tied[1].chunk.file, "docs/b.md");
        assert_eq!(tied[0].score, tied[1].score);
    }

    #[test]
    fn command_from_docs() {
        let store =
            DocStore::ingest_tree(&tree(&[("README.md", "To run the tests, use `make check`.")]), &default_globs()).unwrap();
        let gw = Gateway::scripted(Script {
            reply: vec![ScriptedReply::choice(json!({"command": "make check"})).expecting("ExecuteTests")],
        });
        let cmd = infer_test_command(
            &store,
            &gw,
            &CommandContext {
                label: "ExecuteTests",
                task: "fix bug",
                target_files: &[],
                framework: Framework::Pytest,
            },
        );
        assert_eq!(cmd.template, "make check");
        assert_eq!(cmd.source, CommandSource::Documentation);
        assert_eq!(cmd.render(&["tests/test_a.py".into()]), "make check");
    }

    #[test]
    fn fallbacks() {
        let empty = DocStore::ingest_tree(&TextTree::new(), &default_globs()).unwrap();
        let gw = Gateway::scripted(Script::default());
        let ctx = CommandContext {
            label: "ExecuteTests",
            task: "t",
            target_files: &[],
            framework: Framework::Unittest,
        };
        let cmd = infer_test_command(&empty, &gw, &ctx);
        assert_eq!(cmd.template, Framework::Unittest.default_template());
        assert_eq!(gw.ledger().totals().calls, 0);

        let store = DocStore::ingest_tree(&tree(&[("README.md", "run tests somehow")]), &default_globs()).unwrap();
        let gw = Gateway::scripted(Script {
            reply: vec![ScriptedReply::choice(json!({"command": "echo 'unterminated"}))],
        });
        let cmd = infer_test_command(&store, &gw, &ctx);
        assert!(matches!(cmd.source, CommandSource::Fallback { .. }));
        assert!(!cmd.template.is_empty());
    }

    #[test]
    fn render_quotes_tests() {
        let cmd = TestCommand::fallback(Framework::Pytest, "x");
        assert_eq!(
            cmd.render(&["tests/a b.py".into(), "tests/c.py".into()]),
            "python3 -m pytest -q -p no:cacheprovider 'tests/a b.py' tests/c.py"
        );
        assert_eq!(cmd.render(&[]), "python3 -m pytest -q -p no:cacheprovider");
    }

    #[test]
    fn framework_detection() {
        assert_eq!(Framework::detect(["unittest", "pytest", "unittest"], false), Framework::Unittest);
        assert_eq!(Framework::detect([], true), Framework::Cargo);
        assert_eq!(Framework::detect([], false), Framework::Pytest);
    }
}

//! Config-driven batch runs. Each stage reads the previous stage's files
//! from the run directory and writes its own, so stages can be rerun one
//! at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ArticleSet, GoldKind, GoldStandard};
use crate::extract::{self, Flag, ScoreRecord};
use crate::fusion::{self, DeParams, FusionRow, FusionSettings};
use crate::gateway::{self, Backend, CompletionTask, MockBackend, ModelConfig, OpenAiBackend, RawRecord, Status, Strategy, TaskKey};
use crate::io::write_atomic;
use crate::promptgen::{self, SystemPromptTemplate};
use crate::report::{self, AggregateRow, AveragingRow, CorrelationRow, SignTestRow, Tables};
use crate::seed::{self, stage};
use crate::stats::{self, ColumnId, ScoreMatrix};
use crate::violin;
use crate::wata::{self, WataOptions};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Json { path: String, line: usize, message: String },
    #[error("{path} not found; run the `{stage}` stage first")]
    MissingArtifact { path: String, stage: &'static str },
    #[error("no articles to score after ingest")]
    NoArticles,
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Prompt(#[from] promptgen::PromptError),
    #[error(transparent)]
    Violin(#[from] violin::ViolinError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSource {
    pub kind: GoldKind,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            reps: stats::DEFAULT_BOOTSTRAP_REPS,
            alpha: stats::DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub enabled: bool,
    pub noise_sd: f64,
    pub model_bias_sd: f64,
    pub multi_article_rate: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            noise_sd: 0.8,
            model_bias_sd: 0.3,
            multi_article_rate: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WataConfig {
    pub q_threshold: f64,
    pub min_df: usize,
    /// Significant terms that get KWIC samples.
    pub kwic_terms: usize,
    pub kwic_per_term: usize,
    pub kwic_window: usize,
}

impl Default for WataConfig {
    fn default() -> Self {
        Self {
            q_threshold: wata::DEFAULT_Q,
            min_df: wata::DEFAULT_MIN_DF,
            kwic_terms: 20,
            kwic_per_term: 10,
            kwic_window: 60,
        }
    }
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Zero, Strategy::Few]
}
fn default_iterations() -> u32 {
    gateway::DEFAULT_ITERATIONS
}
fn default_concurrency() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_folds() -> usize {
    fusion::DEFAULT_FOLDS
}

/// One experiment. Relative paths are resolved against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub articles: PathBuf,
    #[serde(default)]
    pub gold: Vec<GoldSource>,
    #[serde(default)]
    pub fewshot_pool: Option<PathBuf>,
    pub system_prompt: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub models: Vec<ModelConfig>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub eligibility_filter: bool,
    #[serde(default)]
    pub sample_per_uoa: Option<usize>,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub de: DeParams,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub mock: MockConfig,
    #[serde(default)]
    pub wata: WataConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<u32>,
    pub concurrency: Option<usize>,
    pub strategies: Option<Vec<Strategy>>,
    pub mock: bool,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = absolute(path.parent().unwrap_or(Path::new(".")));
        Self::from_json(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.iterations {
            self.iterations = k;
        }
        if let Some(c) = o.concurrency {
            self.concurrency = c;
        }
        if let Some(s) = &o.strategies {
            self.strategies = s.clone();
        }
        if o.mock {
            self.mock.enabled = true;
        }
        if let Some(c) = &o.cache_dir {
            self.cache_dir = Some(absolute(c));
        }
        if let Some(out) = &o.out {
            self.output_dir = absolute(out);
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.concurrency < 1 {
            return bad("concurrency must be at least 1".into());
        }
        if self.models.is_empty() {
            return bad("no models configured".into());
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            m.validate().map_err(PipelineError::Config)?;
            if !names.insert(&m.name) {
                return bad(format!("model {} listed twice", m.name));
            }
        }
        if self.strategies.is_empty() {
            return bad("no strategies selected".into());
        }
        if self.strategies.contains(&Strategy::Few) && self.fewshot_pool.is_none() {
            return bad("few-shot strategy needs `fewshot_pool`".into());
        }
        if self.bootstrap.reps < 100 {
            return bad("bootstrap.reps must be at least 100".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.mock.noise_sd < 0.0 {
            return bad("mock.noise_sd must be non-negative".into());
        }
        self.de.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut inputs = vec![("articles", &self.articles), ("system_prompt", &self.system_prompt)];
        if let Some(p) = &self.fewshot_pool {
            inputs.push(("fewshot_pool", p));
        }
        for g in &self.gold {
            inputs.push(("gold", &g.path));
        }
        for (what, p) in inputs {
            if !self.resolve(p).is_file() {
                return bad(format!("{what} file {} does not exist", self.resolve(p).display()));
            }
        }
        Ok(())
    }

    /// Per-stage seeds derived from the master seed.
    pub fn stage_seeds(&self) -> BTreeMap<&'static str, u64> {
        [
            ("sampling", stage::SAMPLING),
            ("fewshot", stage::FEWSHOT),
            ("mock", stage::MOCK),
            ("bootstrap", stage::BOOTSTRAP),
            ("de", stage::DE),
            ("folds", stage::FOLDS),
            ("kwic", stage::KWIC),
        ]
        .into_iter()
        .map(|(n, s)| (n, seed::derive(self.seed, &[s])))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Prompt,
    Score,
    Extract,
    Analyze,
    Fuse,
    Wata,
    Violin,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Prompt,
        Stage::Score,
        Stage::Extract,
        Stage::Analyze,
        Stage::Fuse,
        Stage::Wata,
        Stage::Violin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Prompt => "prompt",
            Stage::Score => "score",
            Stage::Extract => "extract",
            Stage::Analyze => "analyze",
            Stage::Fuse => "fuse",
            Stage::Wata => "wata",
            Stage::Violin => "violin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub base_url: String,
    pub temperature: String,
    pub max_output_tokens: String,
    pub supports_system_role: bool,
}

/// Run description. Contains no timestamps or machine paths so that
/// identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub models: Vec<ModelRecord>,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub failed_at: Option<Stage>,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        let mut config = serde_json::to_value(cfg).expect("config serialises");
        if let Some(obj) = config.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("cache_dir");
        }
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: cfg.stage_seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            models: cfg
                .models
                .iter()
                .map(|m| ModelRecord {
                    name: m.name.clone(),
                    base_url: if cfg.mock.enabled { "mock".into() } else { m.base_url.clone() },
                    temperature: m.temperature.map_or("endpoint default".into(), |t| t.to_string()),
                    max_output_tokens: m.max_output_tokens.map_or("endpoint default".into(), |t| t.to_string()),
                    supports_system_role: m.supports_system_role,
                })
                .collect(),
            stages: Vec::new(),
            failed_at: None,
        }
    }

    fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        if rec.status == StageStatus::Failed {
            self.failed_at = Some(rec.stage);
        } else if self.failed_at == Some(rec.stage) {
            self.failed_at = None;
        }
        self.stages.push(rec);
        self.stages.sort_by_key(|s| s.stage);
    }

    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serialisable"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes()).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, producer: Stage) -> Result<Vec<T>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            stage: producer.name(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Json {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_text(path: &Path, body: &str) -> Result<(), PipelineError> {
    write_atomic(path, body.as_bytes()).map_err(io_err(path))
}

/// File-name-safe form of a label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

struct Outcome {
    counts: BTreeMap<String, u64>,
    skipped: Option<String>,
}

impl Outcome {
    fn ok(counts: impl IntoIterator<Item = (&'static str, u64)>) -> Self {
        Self {
            counts: counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            skipped: None,
        }
    }

    fn skipped(reason: impl Into<String>) -> Self {
        Self {
            counts: BTreeMap::new(),
            skipped: Some(reason.into()),
        }
    }
}

/// Executes stages against one run directory.
pub struct Runner<'a> {
    cfg: ExperimentConfig,
    out: PathBuf,
    backend: Option<&'a dyn Backend>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let out = cfg.output_dir();
        Ok(Self { cfg, out, backend: None })
    }

    /// Uses `backend` for the score stage instead of the configured one.
    pub fn with_backend(mut self, backend: &'a dyn Backend) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_manifest(&self) -> Manifest {
        let fresh = Manifest::new(&self.cfg);
        match std::fs::read_to_string(self.path(MANIFEST)).ok().and_then(|t| serde_json::from_str::<Manifest>(&t).ok()) {
            Some(old) if old.config == fresh.config => Manifest { stages: old.stages, failed_at: old.failed_at, ..fresh },
            _ => fresh,
        }
    }

    fn save_manifest(&self, m: &Manifest) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(m).expect("manifest serialises");
        s.push('\n');
        write_text(&self.path(MANIFEST), &s)
    }

    /// Runs `stages` in pipeline order, stopping at the first failure. The
    /// manifest is updated after every stage.
    pub fn run(&self, stages: &[Stage]) -> Result<Manifest, PipelineError> {
        std::fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        let mut manifest = self.load_manifest();
        let mut todo: Vec<Stage> = stages.to_vec();
        todo.sort();
        todo.dedup();
        for st in todo {
            info!("stage {}", st.name());
            let result = match st {
                Stage::Ingest => self.ingest(),
                Stage::Prompt => self.prompt(),
                Stage::Score => self.score(),
                Stage::Extract => self.extract(),
                Stage::Analyze => self.analyze(),
                Stage::Fuse => self.fuse(),
                Stage::Wata => self.wata(),
                Stage::Violin => self.violin(),
            };
            match result {
                Ok(o) => {
                    if let Some(reason) = &o.skipped {
                        warn!("stage {} skipped: {reason}", st.name());
                    }
                    manifest.record(StageRecord {
                        stage: st,
                        status: if o.skipped.is_some() { StageStatus::Skipped } else { StageStatus::Ok },
                        counts: o.counts,
                        message: o.skipped,
                    });
                    self.save_manifest(&manifest)?;
                }
                Err(e) => {
                    manifest.record(StageRecord {
                        stage: st,
                        status: StageStatus::Failed,
                        counts: BTreeMap::new(),
                        message: Some(e.to_string()),
                    });
                    self.save_manifest(&manifest)?;
                    return Err(e);
                }
            }
        }
        Ok(manifest)
    }

    fn articles(&self) -> Result<ArticleSet, PipelineError> {
        let p = self.path("articles.jsonl");
        if !p.exists() {
            return Err(PipelineError::MissingArtifact {
                path: p.display().to_string(),
                stage: Stage::Ingest.name(),
            });
        }
        Ok(corpus::load_articles(&p)?)
    }

    fn golds(&self) -> Result<Vec<GoldStandard>, PipelineError> {
        let mut out = Vec::new();
        for g in &self.cfg.gold {
            let p = self.path(&format!("gold_{}.csv", g.kind));
            if !p.exists() {
                return Err(PipelineError::MissingArtifact {
                    path: p.display().to_string(),
                    stage: Stage::Ingest.name(),
                });
            }
            out.push(corpus::load_gold(&p, g.kind)?);
        }
        Ok(out)
    }

    fn ingest(&self) -> Result<Outcome, PipelineError> {
        let loaded = corpus::load_articles(self.cfg.resolve(&self.cfg.articles))?;
        if loaded.is_empty() {
            return Err(PipelineError::NoArticles);
        }
        let eligible = if self.cfg.eligibility_filter {
            corpus::filter_eligible(&loaded)
        } else {
            loaded.clone()
        };
        let set = match self.cfg.sample_per_uoa {
            Some(n) => corpus::sample_per_uoa(&eligible, n, self.cfg.stage_seeds()["sampling"]),
            None => eligible.clone(),
        };
        if set.is_empty() {
            return Err(PipelineError::NoArticles);
        }
        write_text(&self.path("articles.jsonl"), &set.to_jsonl())?;
        let mut counts = vec![
            ("loaded", loaded.len() as u64),
            ("eligible", eligible.len() as u64),
            ("articles", set.len() as u64),
            ("units", set.units().len() as u64),
        ];
        let mut gold_counts = Vec::new();
        for g in &self.cfg.gold {
            let gold = corpus::load_gold(self.cfg.resolve(&g.path), g.kind)?.restricted_to(&set);
            gold.validate(&set)?;
            let mut csv = String::from("article_id,score\n");
            for (id, s) in &gold.scores {
                let _ = writeln!(csv, "{id},{s}");
            }
            write_text(&self.path(&format!("gold_{}.csv", g.kind)), &csv)?;
            gold_counts.push((g.kind, gold.scores.len() as u64));
        }
        for (k, n) in gold_counts {
            counts.push((
                match k {
                    GoldKind::DepartmentalProxy => "gold_departmental_proxy",
                    GoldKind::Individual => "gold_individual",
                },
                n,
            ));
        }
        Ok(Outcome::ok(counts))
    }

    fn prompt(&self) -> Result<Outcome, PipelineError> {
        let set = self.articles()?;
        let system = SystemPromptTemplate::load(self.cfg.resolve(&self.cfg.system_prompt))?;
        let pool = match (&self.cfg.fewshot_pool, self.cfg.strategies.contains(&Strategy::Few)) {
            (Some(p), true) => Some(corpus::load_fewshot_pool(self.cfg.resolve(p), &set)?),
            _ => None,
        };
        let fewshot_seed = self.cfg.stage_seeds()["fewshot"];
        let mut tasks = Vec::new();
        for article in set.iter() {
            let zero_user = promptgen::build_zero_shot_user(article)?;
            for m in &self.cfg.models {
                for &strategy in &self.cfg.strategies {
                    for iteration in 1..=self.cfg.iterations {
                        let user = match strategy {
                            Strategy::Zero => zero_user.clone(),
                            Strategy::Few => {
                                let call = seed::derive(
                                    seed::hash_str(&article.id),
                                    &[seed::hash_str(&m.name), u64::from(iteration)],
                                );
                                let sel = promptgen::select_fewshot(article, pool.as_ref().expect("pool loaded"), fewshot_seed, call)?;
                                promptgen::build_few_shot_user(article, &sel)?
                            }
                        };
                        tasks.push(CompletionTask {
                            key: TaskKey {
                                article_id: article.id.clone(),
                                model: m.name.clone(),
                                strategy,
                                iteration,
                            },
                            messages: promptgen::compose_messages(&system, &user, m.supports_system_role),
                        });
                    }
                }
            }
        }
        write_jsonl(&self.path("tasks.jsonl"), &tasks)?;
        Ok(Outcome::ok([
            ("articles", set.len() as u64),
            ("models", self.cfg.models.len() as u64),
            ("strategies", self.cfg.strategies.len() as u64),
            ("iterations", u64::from(self.cfg.iterations)),
            ("tasks", tasks.len() as u64),
        ]))
    }

    fn mock_backend(&self) -> Result<MockBackend, PipelineError> {
        // latent quality comes from the individual gold when present
        let golds = self.golds()?;
        let latent = golds
            .iter()
            .find(|g| g.kind == GoldKind::Individual)
            .or(golds.first())
            .map(|g| g.scores.clone())
            .unwrap_or_default();
        let mut b = MockBackend::new(latent, self.cfg.mock.noise_sd, self.cfg.stage_seeds()["mock"]);
        b.model_bias_sd = self.cfg.mock.model_bias_sd;
        b.multi_article_rate = self.cfg.mock.multi_article_rate;
        Ok(b)
    }

    fn score(&self) -> Result<Outcome, PipelineError> {
        let tasks: Vec<CompletionTask> = read_jsonl(&self.path("tasks.jsonl"), Stage::Prompt)?;
        let cfgs: BTreeMap<String, ModelConfig> = self.cfg.models.iter().map(|m| (m.name.clone(), m.clone())).collect();
        let cache = self.cfg.cache_dir.as_ref().map(|d| gateway::ResponseCache::new(self.cfg.resolve(d)));
        let mock;
        let live;
        let backend: &dyn Backend = match self.backend {
            Some(b) => b,
            None if self.cfg.mock.enabled => {
                mock = self.mock_backend()?;
                &mock
            }
            None => {
                live = OpenAiBackend::default();
                &live
            }
        };
        let records = gateway::run_batch(&tasks, &cfgs, self.cfg.concurrency, cache.as_ref(), backend);
        let failed = records.iter().filter(|r| r.status == Status::Failed).count() as u64;
        write_jsonl(&self.path("raw.jsonl"), &records)?;
        Ok(Outcome::ok([
            ("tasks", tasks.len() as u64),
            ("ok", records.len() as u64 - failed),
            ("failed", failed),
        ]))
    }

    fn extract(&self) -> Result<Outcome, PipelineError> {
        let raw: Vec<RawRecord> = read_jsonl(&self.path("raw.jsonl"), Stage::Score)?;
        let scores: Vec<ScoreRecord> = raw.iter().filter(|r| r.status == Status::Ok).map(extract::extract_record).collect();
        let count = |f: Flag| scores.iter().filter(|s| s.flags.contains(&f)).count() as u64;
        write_jsonl(&self.path("scores.jsonl"), &scores)?;
        Ok(Outcome::ok([
            ("parsed", scores.len() as u64),
            ("usable", scores.iter().filter(|s| s.is_usable()).count() as u64),
            ("multi_article", count(Flag::MultiArticle)),
            ("no_score_found", count(Flag::NoScoreFound)),
            ("subscore_fallback", count(Flag::SubscoreFallback)),
            ("out_of_range_clamped", count(Flag::OutOfRangeClamped)),
        ]))
    }

    fn matrix(&self, set: &ArticleSet) -> Result<(ScoreMatrix, Vec<ScoreRecord>), PipelineError> {
        let scores: Vec<ScoreRecord> = read_jsonl(&self.path("scores.jsonl"), Stage::Extract)?;
        let ids: Vec<String> = set.iter().map(|a| a.id.clone()).collect();
        Ok((ScoreMatrix::from_records(&ids, &scores), scores))
    }

    fn analyze(&self) -> Result<Outcome, PipelineError> {
        let set = self.articles()?;
        let units = set.unit_map();
        let (matrix, scores) = self.matrix(&set)?;
        let ids: Vec<String> = matrix.articles().to_vec();
        let first: Vec<ScoreRecord> = scores.iter().filter(|s| s.key.iteration == 1).cloned().collect();
        let single = ScoreMatrix::from_records(&ids, &first);
        write_text(&self.path("matrix.csv"), &matrix_csv(&matrix, &units))?;

        let boot_seed = self.cfg.stage_seeds()["bootstrap"];
        let mut tables = Tables::default();
        let golds = self.golds()?;
        for gold in &golds {
            let mut per_column: BTreeMap<ColumnId, BTreeMap<u8, f64>> = BTreeMap::new();
            for uoa in set.units() {
                let sub = matrix.filter_rows(|id| units[id] == uoa);
                let sub_single = single.filter_rows(|id| units[id] == uoa);
                let g = fusion::gold_column(&sub, gold);
                for col in sub.column_ids() {
                    let seed = seed::derive(boot_seed, &[u64::from(uoa), seed::hash_str(&col.to_string()), seed::hash_str(gold.kind.as_str())]);
                    let values = sub.values(col).expect("listed column");
                    match stats::correlate(&values, &g, self.cfg.bootstrap.reps, self.cfg.bootstrap.alpha, seed) {
                        Ok(r) => {
                            per_column.entry(col.clone()).or_default().insert(uoa, r.rho);
                            tables.correlations.push(CorrelationRow {
                                uoa: uoa.to_string(),
                                model: col.model.clone(),
                                strategy: col.strategy.to_string(),
                                gold_kind: gold.kind.to_string(),
                                n: r.n,
                                rho: r.rho,
                                ci_low: r.ci_low,
                                ci_high: r.ci_high,
                            });
                        }
                        Err(e) => warn!("uoa {uoa} {col} vs {}: {e}", gold.kind),
                    }
                    if let Some(sv) = sub_single.values(col) {
                        let (a, b) = stats::complete_pairs(&sv, &g);
                        let (c, d) = stats::complete_pairs(&values, &g);
                        if let (Ok(rs), Ok(rm)) = (stats::spearman(&a, &b), stats::spearman(&c, &d)) {
                            tables.averaging.push(AveragingRow {
                                uoa: uoa.to_string(),
                                model: col.model.clone(),
                                strategy: col.strategy.to_string(),
                                gold_kind: gold.kind.to_string(),
                                rho_single: rs,
                                rho_mean: rm,
                            });
                        }
                    }
                }
            }
            for (col, by_unit) in &per_column {
                let rhos: Vec<f64> = by_unit.values().copied().collect();
                if let Ok(a) = stats::aggregate_across_units(&rhos) {
                    tables.aggregates.push(AggregateRow {
                        model: col.model.clone(),
                        strategy: col.strategy.to_string(),
                        gold_kind: gold.kind.to_string(),
                        units: a.m,
                        mean_rho: a.mean,
                        ci_low: a.ci_low,
                        ci_high: a.ci_high,
                    });
                }
            }
            // few-shot against zero-shot, per model, over units scored both ways
            for m in &self.cfg.models {
                let (Some(z), Some(f)) = (
                    per_column.get(&ColumnId::new(m.name.clone(), Strategy::Zero)),
                    per_column.get(&ColumnId::new(m.name.clone(), Strategy::Few)),
                ) else {
                    continue;
                };
                let shared: Vec<u8> = z.keys().filter(|u| f.contains_key(u)).copied().collect();
                let fz: Vec<f64> = shared.iter().map(|u| f[u]).collect();
                let zz: Vec<f64> = shared.iter().map(|u| z[u]).collect();
                if let Ok(t) = stats::sign_test(&fz, &zz) {
                    tables.sign_tests.push(SignTestRow {
                        comparison: format!("{}: few > zero", m.name),
                        gold_kind: gold.kind.to_string(),
                        k: t.k,
                        n: t.n,
                        p_value: t.p_value,
                    });
                }
            }
        }
        report::emit_tables(&self.out, &tables).map_err(io_err(&self.out))?;
        let cells = matrix
            .column_ids()
            .map(|c| matrix.cells(c).expect("listed").iter().filter(|x| x.mean.is_some()).count() as u64)
            .sum();
        let mut counts = vec![
            ("columns", matrix.n_columns() as u64),
            ("matrix_cells", cells),
            ("correlations", tables.correlations.len() as u64),
        ];
        if golds.is_empty() {
            counts.push(("gold_standards", 0));
        }
        Ok(Outcome::ok(counts))
    }

    fn fuse(&self) -> Result<Outcome, PipelineError> {
        let set = self.articles()?;
        let units = set.unit_map();
        let (matrix, _) = self.matrix(&set)?;
        if matrix.n_columns() < 2 {
            return Ok(Outcome::skipped(format!("fusion needs at least 2 score columns, have {}", matrix.n_columns())));
        }
        let golds = self.golds()?;
        if golds.is_empty() {
            return Ok(Outcome::skipped("no gold standard configured"));
        }
        let de_seed = self.cfg.stage_seeds()["de"];
        let mut tables = Tables::default();
        let mut rows_total = 0u64;
        for gold in &golds {
            let kind_h = seed::hash_str(gold.kind.as_str());
            let mut rows: Vec<FusionRow> = Vec::new();
            for uoa in set.units() {
                let sub = matrix.filter_rows(|id| units[id] == uoa);
                let g = fusion::gold_column(&sub, gold);
                let settings = FusionSettings {
                    params: self.cfg.de,
                    folds: self.cfg.folds,
                    seed: seed::derive(de_seed, &[kind_h, u64::from(uoa)]),
                    strata: None,
                };
                match fusion::fusion_row(&uoa.to_string(), &sub, &g, &settings) {
                    Ok(r) => rows.push(r),
                    Err(e) => warn!("fusion uoa {uoa} vs {}: {e}", gold.kind),
                }
            }
            let g = fusion::gold_column(&matrix, gold);
            let (norm, ng) = fusion::normalize_within_units(&matrix, &g, &units);
            let settings = FusionSettings {
                params: self.cfg.de,
                folds: self.cfg.folds,
                seed: seed::derive(de_seed, &[kind_h, 0]),
                strata: Some(&units),
            };
            match fusion::fusion_row("All", &norm, &ng, &settings) {
                Ok(r) => rows.push(r),
                Err(e) => warn!("fusion All vs {}: {e}", gold.kind),
            }
            rows_total += rows.len() as u64;
            tables.fusion.push((gold.kind.to_string(), rows));
        }
        report::emit_tables(&self.out, &tables).map_err(io_err(&self.out))?;
        Ok(Outcome::ok([("fusion_rows", rows_total)]))
    }

    fn wata(&self) -> Result<Outcome, PipelineError> {
        let raw: Vec<RawRecord> = read_jsonl(&self.path("raw.jsonl"), Stage::Score)?;
        let doc_id = |r: &RawRecord| format!("{}|{}|{}", r.key.article_id, r.key.model, r.key.iteration);
        let split = |s: Strategy| -> Vec<(String, String)> {
            raw.iter()
                .filter(|r| r.status == Status::Ok && r.key.strategy == s)
                .map(|r| (doc_id(r), r.raw_text.clone()))
                .collect()
        };
        let (zero, few) = (split(Strategy::Zero), split(Strategy::Few));
        if zero.is_empty() || few.is_empty() {
            return Ok(Outcome::skipped("term comparison needs both zero-shot and few-shot reports"));
        }
        let tok = |c: &[(String, String)]| -> Vec<wata::TokenizedDoc> { c.iter().map(|(id, t)| wata::tokenize(id, t)).collect() };
        let opts = WataOptions {
            q_threshold: self.cfg.wata.q_threshold,
            min_df: self.cfg.wata.min_df,
        };
        let sig = wata::compare(&tok(&zero), &tok(&few), &opts).expect("both corpora non-empty");
        write_text(&self.path("wata_terms.csv"), &wata::term_stats_csv(&sig, &opts, "zero-shot", "few-shot"))?;
        let kwic_seed = self.cfg.stage_seeds()["kwic"];
        let mut groups = Vec::new();
        for s in sig.iter().take(self.cfg.wata.kwic_terms) {
            let src = if s.direction == wata::Direction::B { &few } else { &zero };
            let lines = wata::kwic(&s.term, src, self.cfg.wata.kwic_per_term.max(1), self.cfg.wata.kwic_window, kwic_seed)
                .expect("sample size at least 1");
            groups.push((s.clone(), lines));
        }
        write_text(&self.path("wata_kwic.txt"), &wata::kwic_report(&groups, &opts))?;
        Ok(Outcome::ok([
            ("docs_zero", zero.len() as u64),
            ("docs_few", few.len() as u64),
            ("significant_terms", sig.len() as u64),
        ]))
    }

    fn violin(&self) -> Result<Outcome, PipelineError> {
        let set = self.articles()?;
        let (matrix, _) = self.matrix(&set)?;
        let golds = self.golds()?;
        if golds.is_empty() {
            return Ok(Outcome::skipped("no gold standard configured"));
        }
        let mut columns: Vec<(String, Vec<Option<f64>>)> = matrix
            .column_ids()
            .map(|c| (c.to_string(), matrix.values(c).expect("listed")))
            .collect();
        if matrix.n_columns() > 1 {
            columns.push(("mean_fusion".into(), fusion::mean_fusion(&matrix).expect("columns present")));
        }
        let mut csv = String::new();
        let (mut svgs, mut discarded) = (0u64, 0u64);
        for gold in &golds {
            let g = fusion::gold_column(&matrix, gold);
            if !g.iter().flatten().any(|v| v.fract() == 0.0) {
                warn!("violin: {} gold has no integer scores", gold.kind);
                continue;
            }
            for (label, values) in &columns {
                let pairs: Vec<(f64, f64)> = values.iter().zip(&g).filter_map(|(v, g)| Some(((*v)?, (*g)?))).collect();
                let summary = match violin::violin_summary(&pairs) {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("violin {label} vs {}: {e}", gold.kind);
                        continue;
                    }
                };
                let body = violin::summary_csv(&format!("{label} [{}]", gold.kind), &summary);
                if csv.is_empty() {
                    csv.push_str(&body);
                } else {
                    csv.extend(body.lines().skip(2).map(|l| format!("{l}\n")));
                }
                let path = self.out.join("violin").join(gold.kind.as_str()).join(format!("{}.svg", sanitize(label)));
                violin::emit_violin_svg(&summary, &format!("{label} vs {} gold", gold.kind), &path)?;
                svgs += 1;
                discarded = discarded.max(summary.discarded as u64);
            }
        }
        write_text(&self.path("violin_summary.csv"), &csv)?;
        Ok(Outcome::ok([("svgs", svgs), ("non_integer_gold_discarded", discarded)]))
    }
}

/// Article rows with uoa, then per column the mean score and effective K.
pub fn matrix_csv(m: &ScoreMatrix, units: &BTreeMap<String, u8>) -> String {
    let cols: Vec<&ColumnId> = m.column_ids().collect();
    let mut out = String::from("article_id,uoa");
    for c in &cols {
        let _ = write!(out, ",{c},{c} k");
    }
    out.push('\n');
    for (i, id) in m.articles().iter().enumerate() {
        let _ = write!(out, "{id},{}", units.get(id).map(u8::to_string).unwrap_or_default());
        for c in &cols {
            let cell = m.cells(c).expect("listed")[i];
            let _ = write!(out, ",{},{}", cell.mean.map(|v| format!("{v:.6}")).unwrap_or_default(), cell.k);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.jsonl", "sys.txt"] {
            std::fs::write(dir.path().join(f), "x").unwrap();
        }
        let text = r#"{"schema_version":1,"articles":"a.jsonl","system_prompt":"sys.txt","output_dir":"out",
            "models":[{"name":"m","base_url":"http://localhost"}],"seed":7,"strategies":["zero"]}"#;
        let cfg = ExperimentConfig::from_json(text, dir.path()).unwrap();
        assert_eq!((cfg.iterations, cfg.concurrency, cfg.folds), (5, 8, 10));
        assert_eq!(cfg.bootstrap, BootstrapConfig { reps: 1000, alpha: 0.05 });
        assert_eq!(cfg.de, DeParams::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.output_dir(), dir.path().join("out"));

        let mut few = cfg.clone();
        few.strategies = vec![Strategy::Few];
        assert!(matches!(few.validate(), Err(PipelineError::Config(m)) if m.contains("fewshot_pool")));
        let mut k0 = cfg.clone();
        k0.apply(&Overrides { iterations: Some(0), ..Default::default() });
        assert!(k0.validate().is_err());
        let mut missing = cfg.clone();
        missing.articles = "nope.jsonl".into();
        assert!(missing.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version":1,"bogus":1}"#, dir.path()).is_err());
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"schema_version":1,"articles":"a","system_prompt":"s","output_dir":"o","models":[],"seed":1}"#;
        let cfg = ExperimentConfig::from_json(text, dir.path()).unwrap();
        let seeds: BTreeSet<u64> = cfg.stage_seeds().values().copied().collect();
        assert_eq!(seeds.len(), 7);
    }

    #[test]
    fn sanitize_labels() {
        assert_eq!(sanitize("org/model:7b/zero"), "org_model_7b_zero");
    }
}

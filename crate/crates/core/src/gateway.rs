//! Chat-completion execution: the OpenAI-compatible client with retries, a
//! deterministic mock backend, the on-disk response cache and the bounded
//! concurrent batch runner.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::promptgen::MessageSequence;
use crate::seed;

/// Iterations per article when not configured.
pub const DEFAULT_ITERATIONS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Zero,
    Few,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Zero => "zero",
            Strategy::Few => "few",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Strategy::Zero),
            "few" => Ok(Strategy::Few),
            other => Err(format!("unknown strategy {other:?} (expected zero or few)")),
        }
    }
}

fn default_timeout() -> f64 {
    120.0
}

/// One chat-completion endpoint and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token; `None`
    /// for endpoints without authentication.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_true")]
    pub supports_system_role: bool,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_output_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("model name is empty".into());
        }
        if !(self.request_timeout_secs > 0.0) {
            return Err(format!("model {}: request timeout must be positive", self.name));
        }
        Ok(())
    }
}

/// Identifies one completion within a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskKey {
    pub article_id: String,
    pub model: String,
    pub strategy: Strategy,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionTask {
    #[serde(flatten)]
    pub key: TaskKey,
    pub messages: MessageSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// The outcome of one task, successful or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(flatten)]
    pub key: TaskKey,
    pub status: Status,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("{model}: HTTP {status} is not retryable (attempt {attempts}): {body}")]
    Rejected {
        model: String,
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("{model}: gave up after {attempts} attempts; last error: {last}")]
    Exhausted {
        model: String,
        attempts: u32,
        last: String,
        last_status: Option<u16>,
    },
    #[error("{model}: API key variable {var} is not set")]
    MissingApiKey { model: String, var: String },
    #[error("{model}: response has no assistant content: {detail}")]
    BadResponse {
        model: String,
        detail: String,
        attempts: u32,
    },
    #[error("no configuration for model {0:?}")]
    UnknownModel(String),
}

impl GatewayError {
    pub fn attempts(&self) -> u32 {
        match self {
            GatewayError::Rejected { attempts, .. }
            | GatewayError::Exhausted { attempts, .. }
            | GatewayError::BadResponse { attempts, .. } => *attempts,
            GatewayError::MissingApiKey { .. } | GatewayError::UnknownModel(_) => 0,
        }
    }
}

/// Assistant text plus transport bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Connection-level failure (timeout, refused, reset). Always retryable.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Minimal JSON-over-HTTP POST, swappable for tests.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

/// Blocking HTTP transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self {
            agent: ureq::AgentBuilder::new().build(),
        }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self
            .agent
            .post(url)
            .timeout(timeout)
            .set("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| TransportError(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpResponse {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(TransportError(t.to_string())),
        }
    }
}

/// Exponential backoff schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, given that `attempt` (1-based) failed.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt as i32 - 1))
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Request body for the chat-completions endpoint.
pub fn request_body(cfg: &ModelConfig, messages: &MessageSequence) -> serde_json::Value {
    let mut body = serde_json::json!({
        "model": cfg.name,
        "messages": messages,
    });
    if let Some(t) = cfg.temperature {
        body["temperature"] = serde_json::json!(t);
    }
    if let Some(m) = cfg.max_output_tokens {
        body["max_tokens"] = serde_json::json!(m);
    }
    body
}

fn assistant_content(body: &str) -> Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| "missing choices[0].message.content".to_string())?;
    if content.is_empty() {
        return Err("empty content".into());
    }
    Ok(content.to_string())
}

/// Posts `messages` to `{base_url}/chat/completions` and returns the first
/// choice's content. 429, 5xx and connection failures are retried with
/// exponential backoff; other non-2xx statuses fail immediately.
pub fn complete<T: Transport + ?Sized>(
    transport: &T,
    cfg: &ModelConfig,
    messages: &MessageSequence,
    retry: &RetryPolicy,
) -> Result<Completion, GatewayError> {
    let bearer = match &cfg.api_key_env {
        Some(var) if !var.is_empty() => Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey {
            model: cfg.name.clone(),
            var: var.clone(),
        })?),
        _ => None,
    };
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let body = request_body(cfg, messages);
    let timeout = Duration::from_secs_f64(cfg.request_timeout_secs);
    let started = Instant::now();
    let mut last = String::new();
    let mut last_status = None;
    for attempt in 1..=retry.max_attempts {
        match transport.post_json(&url, bearer.as_deref(), &body, timeout) {
            Ok(resp) if (200..300).contains(&resp.status) => {
                return match assistant_content(&resp.body) {
                    Ok(text) => Ok(Completion {
                        text,
                        attempts: attempt,
                        latency_ms: started.elapsed().as_millis() as u64,
                    }),
                    Err(detail) => Err(GatewayError::BadResponse {
                        model: cfg.name.clone(),
                        detail,
                        attempts: attempt,
                    }),
                };
            }
            Ok(resp) if retryable_status(resp.status) => {
                last = format!("HTTP {}", resp.status);
                last_status = Some(resp.status);
            }
            Ok(resp) => {
                return Err(GatewayError::Rejected {
                    model: cfg.name.clone(),
                    status: resp.status,
                    body: resp.body,
                    attempts: attempt,
                })
            }
            Err(e) => {
                last = e.0;
                last_status = None;
            }
        }
        log::debug!("{}: attempt {attempt} failed ({last})", cfg.name);
        if attempt < retry.max_attempts {
            std::thread::sleep(retry.delay_after(attempt));
        }
    }
    Err(GatewayError::Exhausted {
        model: cfg.name.clone(),
        attempts: retry.max_attempts,
        last,
        last_status,
    })
}

/// Anything that can turn a task into assistant text.
pub trait Backend: Sync {
    fn complete(&self, cfg: &ModelConfig, task: &CompletionTask) -> Result<Completion, GatewayError>;
}

/// Live endpoint backend.
pub struct OpenAiBackend<T: Transport = UreqTransport> {
    pub transport: T,
    pub retry: RetryPolicy,
}

impl Default for OpenAiBackend {
    fn default() -> Self {
        Self {
            transport: UreqTransport::default(),
            retry: RetryPolicy::default(),
        }
    }
}

impl<T: Transport> Backend for OpenAiBackend<T> {
    fn complete(&self, cfg: &ModelConfig, task: &CompletionTask) -> Result<Completion, GatewayError> {
        complete(&self.transport, cfg, &task.messages, &self.retry)
    }
}

/// Report formats produced by [`simulate_completion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStyle {
    /// Structured report closing with an overall score.
    Plain,
    /// A `<think>` deliberation followed by the report.
    Reasoning,
    /// Per-dimension `N/4` scores with no overall.
    SubscoresOnly,
    /// Scores for the four examples and the target, as a confused model
    /// would produce for a few-shot prompt.
    MultiArticle,
}

pub const ALL_STYLES: [ReportStyle; 4] = [
    ReportStyle::Plain,
    ReportStyle::Reasoning,
    ReportStyle::SubscoresOnly,
    ReportStyle::MultiArticle,
];

/// Rounds to the nearest half star.
pub fn round_to_half(x: f64) -> f64 {
    (x * 2.0).round() / 2.0
}

fn fmt_star(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn level_label(v: f64) -> &'static str {
    match v.floor() as i64 {
        i64::MIN..=1 => "Nationally Recognised",
        2 => "Internationally Recognised",
        3 => "Internationally Excellent",
        _ => "World Leading",
    }
}

/// The star score a simulated report will carry.
pub fn simulated_score(latent_quality: f64, noise_sd: f64, seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let noise = if noise_sd > 0.0 {
        Normal::new(0.0, noise_sd).expect("finite sd").sample(&mut rng)
    } else {
        0.0
    };
    round_to_half((latent_quality + noise).clamp(1.0, 4.0))
}

/// Synthetic report in `style` embedding the score
/// `round_to_half(clamp(latent + N(0, noise_sd), 1, 4))`.
pub fn simulate_completion(latent_quality: f64, noise_sd: f64, seed: u64, style: ReportStyle) -> String {
    let s = simulated_score(latent_quality, noise_sd, seed);
    let star = fmt_star(s);
    let alt = fmt_star(if s >= 3.0 { s - 1.0 } else { s + 1.0 });
    match style {
        ReportStyle::Plain => format!(
            "## Evaluation of the submitted article\n\n\
             **1. Originality ({star}*)** The work adds to earlier studies in the area.\n\n\
             **2. Significance ({star}*)** The findings are likely to inform further work.\n\n\
             **3. Rigour ({star}*)** The design and analysis suit the question addressed.\n\n\
             **Score: {star}* ({})**\n",
            level_label(s)
        ),
        ReportStyle::Reasoning => format!(
            "<think> Okay, let's go through the abstract against the three criteria. \
             The design looks sound. Could this reach {alt}*? The contribution seems \
             narrower than that. Settling on {star}* overall. </think>\n\n\
             ****Reasoning:****\n\n\
             **Originality ({star}*)** A reasonably new angle on the problem.\n\n\
             **Significance ({star}*)** Useful for the field.\n\n\
             **Rigour ({star}*)** Methods are appropriate.\n\n\
             ****Score: {star}*****\n"
        ),
        ReportStyle::SubscoresOnly => format!(
            "Based on the provided information, I would score this article as follows:\n\n\
             * **Originality: {star}/4**\n\
             * **Significance: {star}/4**\n\
             * **Rigour: {star}/4**\n\n\
             The abstract describes a focused study with clear aims.\n"
        ),
        ReportStyle::MultiArticle => format!(
            "Based on the provided abstracts, I will evaluate each article in turn.\n\n\
             **Final Scores:**\n\
             - Article 1: 1*\n\
             - Article 2: 2*\n\
             - Article 3: 3*\n\
             - Article 4: 4*\n\
             - Article 5: {star}*\n"
        ),
    }
}

/// Offline backend that answers every task with a simulated report.
///
/// An article's latent quality comes from `latent` (or a hash of its id when
/// absent), shifted by a persistent per-(model, article) bias so different
/// models disagree the way real ones do. Per-call noise is drawn from a
/// substream keyed by the full task key.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub latent: BTreeMap<String, f64>,
    pub noise_sd: f64,
    pub model_bias_sd: f64,
    /// Probability that a few-shot call comes back as a multi-article report.
    pub multi_article_rate: f64,
    pub seed: u64,
}

impl MockBackend {
    pub fn new(latent: BTreeMap<String, f64>, noise_sd: f64, seed: u64) -> Self {
        Self {
            latent,
            noise_sd,
            model_bias_sd: 0.3,
            multi_article_rate: 0.03,
            seed,
        }
    }

    fn latent_for(&self, article_id: &str) -> f64 {
        self.latent.get(article_id).copied().unwrap_or_else(|| {
            let u = (seed::hash_str(article_id) >> 11) as f64 / (1u64 << 53) as f64;
            1.0 + 3.0 * u
        })
    }

    fn style_for(&self, key: &TaskKey, rng: &mut impl Rng) -> ReportStyle {
        if key.strategy == Strategy::Few && rng.gen_bool(self.multi_article_rate) {
            return ReportStyle::MultiArticle;
        }
        let home = if seed::hash_str(&key.model) % 2 == 0 {
            ReportStyle::Plain
        } else {
            ReportStyle::Reasoning
        };
        match rng.gen_range(0..10) {
            0 => ReportStyle::SubscoresOnly,
            1 | 2 => match home {
                ReportStyle::Plain => ReportStyle::Reasoning,
                _ => ReportStyle::Plain,
            },
            _ => home,
        }
    }
}

impl Backend for MockBackend {
    fn complete(&self, _cfg: &ModelConfig, task: &CompletionTask) -> Result<Completion, GatewayError> {
        let key = &task.key;
        let model_h = seed::hash_str(&key.model);
        let article_h = seed::hash_str(&key.article_id);
        let bias_seed = seed::derive(self.seed, &[seed::stage::MOCK, model_h, article_h]);
        let bias = if self.model_bias_sd > 0.0 {
            Normal::new(0.0, self.model_bias_sd)
                .expect("finite sd")
                .sample(&mut seed::rng(bias_seed))
        } else {
            0.0
        };
        let call_seed = seed::derive(
            self.seed,
            &[
                seed::stage::MOCK,
                model_h,
                article_h,
                key.strategy as u64,
                u64::from(key.iteration),
            ],
        );
        let mut rng = seed::rng(seed::derive(call_seed, &[1]));
        let style = self.style_for(key, &mut rng);
        let text = simulate_completion(self.latent_for(&key.article_id) + bias, self.noise_sd, call_seed, style);
        Ok(Completion {
            text,
            attempts: 1,
            latency_ms: 0,
        })
    }
}

/// Hex SHA-256 digest identifying a cacheable request.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn put_field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// Digest over model name, every message byte, temperature and iteration.
/// Fields are length-prefixed so no two distinct inputs share a preimage.
pub fn cache_key(task: &CompletionTask, cfg: &ModelConfig) -> CacheKey {
    let mut h = Sha256::new();
    put_field(&mut h, b"refscore-cache-v1");
    put_field(&mut h, cfg.name.as_bytes());
    for m in task.messages.messages() {
        put_field(&mut h, m.role.as_str().as_bytes());
        put_field(&mut h, m.content.as_bytes());
    }
    match cfg.temperature {
        Some(t) => put_field(&mut h, &t.to_bits().to_le_bytes()),
        None => put_field(&mut h, b"default"),
    }
    put_field(&mut h, &task.key.iteration.to_le_bytes());
    CacheKey(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub model: String,
    /// SHA-256 of the serialised request body.
    pub request_digest: String,
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub stored_at_unix: u64,
}

/// One JSON file per successful response at `{dir}/{model}/{key}.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

fn path_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, model: &str, key: &CacheKey) -> PathBuf {
        self.dir.join(path_safe(model)).join(format!("{key}.json"))
    }

    pub fn load(&self, model: &str, key: &CacheKey) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.path_for(model, key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(e) if &e.key == key => Some(e),
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    /// Atomic replace; concurrent writers of one key leave the last write.
    pub fn store(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(entry).expect("cache entry serialises");
        crate::io::write_atomic(&self.path_for(&entry.model, &entry.key), &bytes)
    }
}

#[derive(Debug, Clone)]
struct Failure {
    attempts: u32,
    message: String,
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Self {
            attempts: e.attempts(),
            message: e.to_string(),
        }
    }
}

fn digest_body(body: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Runs every task and returns one record per task, in task order.
///
/// Tasks sharing a cache key run once. Cache hits never reach the backend.
/// At most `limit` backend calls are in flight at any moment. A failure is
/// recorded on its task and never stops the batch.
pub fn run_batch(
    tasks: &[CompletionTask],
    cfgs: &BTreeMap<String, ModelConfig>,
    limit: usize,
    cache: Option<&ResponseCache>,
    backend: &dyn Backend,
) -> Vec<RawRecord> {
    let limit = limit.max(1);
    // unique work items in first-seen order
    let mut job_of_task: Vec<Result<usize, Failure>> = Vec::with_capacity(tasks.len());
    let mut jobs: Vec<(CacheKey, &CompletionTask, &ModelConfig)> = Vec::new();
    let mut index: HashMap<CacheKey, usize> = HashMap::new();
    for t in tasks {
        let Some(cfg) = cfgs.get(&t.key.model) else {
            job_of_task.push(Err(Failure::from(GatewayError::UnknownModel(t.key.model.clone()))));
            continue;
        };
        let key = cache_key(t, cfg);
        let j = *index.entry(key.clone()).or_insert_with(|| {
            jobs.push((key, t, cfg));
            jobs.len() - 1
        });
        job_of_task.push(Ok(j));
    }

    let mut results: Vec<Option<Result<Completion, Failure>>> = vec![None; jobs.len()];
    let mut pending = Vec::new();
    for (j, (key, _, cfg)) in jobs.iter().enumerate() {
        match cache.and_then(|c| c.load(&cfg.name, key)) {
            Some(hit) => {
                results[j] = Some(Ok(Completion {
                    text: hit.text,
                    attempts: hit.attempts,
                    latency_ms: hit.latency_ms,
                }))
            }
            None => pending.push(j),
        }
    }
    log::info!(
        "batch: {} tasks, {} unique, {} cached, {} to run",
        tasks.len(),
        jobs.len(),
        jobs.len() - pending.len(),
        pending.len()
    );

    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let fresh: Mutex<Vec<(usize, Result<Completion, Failure>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..limit.min(pending.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&j) = pending.get(i) else { break };
                let (key, task, cfg) = &jobs[j];
                let out = backend.complete(cfg, task);
                if let (Ok(c), Some(cache)) = (&out, cache) {
                    let entry = CacheEntry {
                        key: key.clone(),
                        model: cfg.name.clone(),
                        request_digest: digest_body(&request_body(cfg, &task.messages)),
                        text: c.text.clone(),
                        latency_ms: c.latency_ms,
                        attempts: c.attempts,
                        stored_at_unix: std::time::SystemTime::now()
                            .duration_since(std::time::UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0),
                    };
                    if let Err(e) = cache.store(&entry) {
                        log::warn!("cache write failed for {key}: {e}");
                    }
                }
                let n = done.fetch_add(1, Ordering::SeqCst) + 1;
                if n % 500 == 0 {
                    log::info!("batch: {n}/{} completed", pending.len());
                }
                let out = out.map_err(|e| {
                    log::warn!("{}: {e}", task.key.article_id);
                    Failure::from(e)
                });
                fresh.lock().expect("results lock").push((j, out));
            });
        }
    });
    for (j, r) in fresh.into_inner().expect("results lock") {
        results[j] = Some(r);
    }

    tasks
        .iter()
        .zip(job_of_task)
        .map(|(t, job)| {
            let outcome = job.and_then(|j| results[j].clone().expect("every job ran"));
            match outcome {
                Ok(c) => RawRecord {
                    key: t.key.clone(),
                    status: Status::Ok,
                    raw_text: c.text,
                    latency_ms: c.latency_ms,
                    attempts: c.attempts,
                    error: None,
                },
                Err(f) => RawRecord {
                    key: t.key.clone(),
                    status: Status::Failed,
                    raw_text: String::new(),
                    latency_ms: 0,
                    attempts: f.attempts,
                    error: Some(f.message),
                },
            }
        })
        .collect()
}

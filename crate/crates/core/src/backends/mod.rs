//! Clients for the external model services (text-to-image, reward scoring,
//! image/text embedding, LLM completion) behind one JSON-over-HTTP protocol,
//! plus deterministic mock implementations for offline runs.
//!
//! Wire protocol (all `POST`, JSON bodies):
//!
//! | path        | request                              | response                      |
//! |-------------|--------------------------------------|-------------------------------|
//! | `/generate` | `{prompt, seed, width, height}`      | `{image_b64, model_info}`     |
//! | `/score`    | `{text, image_b64}`                  | `{score}`                     |
//! | `/embed`    | `{image_b64}` or `{text}`            | `{vector, dim}`               |
//! | `/complete` | `{instruction}`                      | `{text}`                      |
//!
//! Errors are reported as a non-2xx status with `{error, detail}`.

mod http;
mod mock;

use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util;

pub use http::HttpBackend;
pub use mock::{MockEmbedder, MockImageGenerator, MockLanguageModel, MockRewardModel};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned {status}: {error} ({detail})")]
    Server {
        status: u16,
        error: String,
        detail: String,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Timeouts, transport failures and 5xx responses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Server { status, .. } => *status >= 500,
            BackendError::Protocol(_) | BackendError::InvalidRequest(_) => false,
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// A generated PNG together with its provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageArtifact {
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
    pub seed: u64,
    pub prompt_hash: String,
}

impl ImageArtifact {
    /// Decodes `bytes` to validate them and records dimensions and hash.
    pub fn from_png(bytes: Vec<u8>, seed: u64, prompt: &str) -> BackendResult<Self> {
        let (width, height) = png_dimensions(&bytes)?;
        Ok(Self {
            sha256: util::sha256_hex(&bytes),
            bytes,
            width,
            height,
            seed,
            prompt_hash: util::sha256_hex(prompt.as_bytes()),
        })
    }

    pub fn verify(&self) -> bool {
        util::sha256_hex(&self.bytes) == self.sha256 && png_dimensions(&self.bytes).is_ok()
    }
}

/// Decodes a PNG and returns its size.
pub fn png_dimensions(bytes: &[u8]) -> BackendResult<(u32, u32)> {
    let img = decode_png(bytes)?;
    Ok((img.width(), img.height()))
}

pub fn decode_png(bytes: &[u8]) -> BackendResult<image::RgbImage> {
    image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()
        .map(|img| img.to_rgb8())
        .map_err(|e| BackendError::Protocol(format!("undecodable PNG: {e}")))
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64, width: u32, height: u32) -> BackendResult<ImageArtifact>;
    fn model_info(&self) -> String;
}

pub trait RewardModel: Send + Sync {
    /// Signed preference score of `image` as a depiction of `text`.
    fn score(&self, text: &str, image: &ImageArtifact) -> BackendResult<f64>;
}

pub trait Embedder: Send + Sync {
    /// Raw feature vector as reported by the service.
    fn embed_image_raw(&self, png: &[u8]) -> BackendResult<Vec<f64>>;
    fn embed_text_raw(&self, text: &str) -> BackendResult<Vec<f64>>;

    /// L2-normalized image embedding.
    fn embed_image(&self, png: &[u8]) -> BackendResult<Vec<f64>> {
        unit(self.embed_image_raw(png)?)
    }

    /// L2-normalized text embedding.
    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>> {
        unit(self.embed_text_raw(text)?)
    }
}

fn unit(v: Vec<f64>) -> BackendResult<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(BackendError::Protocol("non-finite embedding".into()));
    }
    if util::l2_norm(&v) == 0.0 {
        return Err(BackendError::Protocol("zero embedding vector".into()));
    }
    Ok(util::normalize(v))
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, instruction: &str) -> BackendResult<String>;
}

/// Retry budget: `1 + max_retries` attempts with exponential backoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut call: impl FnMut() -> BackendResult<T>) -> BackendResult<T> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "backend call failed, retrying");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.available.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

/// Per-client counters: logical calls and physical attempts.
#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicU64,
    attempts: AtomicU64,
}

impl CallStats {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }
}

/// Wraps a backend with retries, an in-flight limit and call counters.
pub struct Guarded<B> {
    inner: B,
    retry: RetryPolicy,
    limit: Semaphore,
    stats: Arc<CallStats>,
}

impl<B> Guarded<B> {
    pub fn new(inner: B, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            inner,
            retry,
            limit: Semaphore::new(max_in_flight.max(1)),
            stats: Arc::new(CallStats::default()),
        }
    }

    pub fn stats(&self) -> Arc<CallStats> {
        Arc::clone(&self.stats)
    }

    fn call<T>(&self, mut f: impl FnMut(&B) -> BackendResult<T>) -> BackendResult<T> {
        self.stats.calls.fetch_add(1, Ordering::SeqCst);
        self.retry.run(|| {
            let _permit = self.limit.acquire();
            self.stats.attempts.fetch_add(1, Ordering::SeqCst);
            f(&self.inner)
        })
    }
}

impl<B: ImageGenerator> ImageGenerator for Guarded<B> {
    fn generate(&self, prompt: &str, seed: u64, width: u32, height: u32) -> BackendResult<ImageArtifact> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        self.call(|b| b.generate(prompt, seed, width, height))
    }

    fn model_info(&self) -> String {
        self.inner.model_info()
    }
}

impl<B: RewardModel> RewardModel for Guarded<B> {
    fn score(&self, text: &str, image: &ImageArtifact) -> BackendResult<f64> {
        self.call(|b| b.score(text, image))
    }
}

impl<B: Embedder> Embedder for Guarded<B> {
    fn embed_image_raw(&self, png: &[u8]) -> BackendResult<Vec<f64>> {
        self.call(|b| b.embed_image_raw(png))
    }

    fn embed_text_raw(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.call(|b| b.embed_text_raw(text))
    }
}

impl<B: LanguageModel> LanguageModel for Guarded<B> {
    fn complete(&self, instruction: &str) -> BackendResult<String> {
        self.call(|b| b.complete(instruction))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointMode {
    Mock,
    Http,
    /// Only meaningful for the LLM: no backend, template prompts.
    None,
}

/// Connection settings for one service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendEndpoint {
    pub kind: EndpointMode,
    pub url: Option<String>,
    /// Seed for mock backends.
    pub seed: u64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub max_in_flight: usize,
    /// Mock reward: probability that a text scores positive.
    pub positive_rate: f64,
    /// Mock embedder output dimension.
    pub dim: usize,
    /// Mock fault injection: every call after this many succeeds fails with 503.
    pub fail_after: Option<u64>,
    /// Mock text-to-image: simulated latency per image.
    pub latency_ms: u64,
}

impl Default for BackendEndpoint {
    fn default() -> Self {
        Self {
            kind: EndpointMode::Mock,
            url: None,
            seed: 0,
            timeout_secs: 60.0,
            max_retries: 2,
            retry_base_delay_ms: 200,
            max_in_flight: 4,
            positive_rate: 0.5,
            dim: 64,
            fail_after: None,
            latency_ms: 0,
        }
    }
}

impl BackendEndpoint {
    pub fn mock(seed: u64) -> Self {
        Self {
            seed,
            retry_base_delay_ms: 0,
            ..Self::default()
        }
    }

    pub fn http(url: impl Into<String>) -> Self {
        Self {
            kind: EndpointMode::Http,
            url: Some(url.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self, name: &str) -> Result<(), String> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!("{name}: timeout_secs must be > 0"));
        }
        if self.max_in_flight == 0 {
            return Err(format!("{name}: max_in_flight must be >= 1"));
        }
        if self.kind == EndpointMode::Http && self.url.as_deref().is_none_or(str::is_empty) {
            return Err(format!("{name}: http backend requires url"));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(format!("{name}: positive_rate must be in [0, 1]"));
        }
        if self.dim == 0 {
            return Err(format!("{name}: dim must be >= 1"));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.retry_base_delay_ms),
        }
    }

    fn http_client(&self) -> BackendResult<HttpBackend> {
        let url = self
            .url
            .clone()
            .ok_or_else(|| BackendError::InvalidRequest("missing url".into()))?;
        HttpBackend::new(url, Duration::from_secs_f64(self.timeout_secs))
    }
}

/// A complete set of service clients plus their call counters.
#[derive(Clone)]
pub struct BackendSet {
    pub t2i: Arc<dyn ImageGenerator>,
    pub reward: Arc<dyn RewardModel>,
    pub embed: Arc<dyn Embedder>,
    pub llm: Option<Arc<dyn LanguageModel>>,
    stats: Vec<(&'static str, Arc<CallStats>)>,
}

impl BackendSet {
    pub fn from_endpoints(
        t2i: &BackendEndpoint,
        reward: &BackendEndpoint,
        embed: &BackendEndpoint,
        llm: &BackendEndpoint,
    ) -> BackendResult<Self> {
        let mut stats = Vec::new();

        let t2i_client: Arc<dyn ImageGenerator> = match t2i.kind {
            EndpointMode::Http => guarded(t2i.http_client()?, t2i, "t2i", &mut stats),
            _ => guarded(
                MockImageGenerator::new(t2i.seed)
                    .with_fail_after(t2i.fail_after)
                    .with_latency(Duration::from_millis(t2i.latency_ms)),
                t2i,
                "t2i",
                &mut stats,
            ),
        };
        let reward_client: Arc<dyn RewardModel> = match reward.kind {
            EndpointMode::Http => guarded(reward.http_client()?, reward, "reward", &mut stats),
            _ => guarded(
                MockRewardModel::new(reward.seed, reward.positive_rate).with_fail_after(reward.fail_after),
                reward,
                "reward",
                &mut stats,
            ),
        };
        let embed_client: Arc<dyn Embedder> = match embed.kind {
            EndpointMode::Http => guarded(embed.http_client()?, embed, "embed", &mut stats),
            _ => guarded(
                MockEmbedder::new(embed.seed, embed.dim).with_fail_after(embed.fail_after),
                embed,
                "embed",
                &mut stats,
            ),
        };
        let llm_client: Option<Arc<dyn LanguageModel>> = match llm.kind {
            EndpointMode::None => None,
            EndpointMode::Http => Some(guarded(llm.http_client()?, llm, "llm", &mut stats)),
            EndpointMode::Mock => Some(guarded(
                MockLanguageModel::new().with_fail_after(llm.fail_after),
                llm,
                "llm",
                &mut stats,
            )),
        };
        Ok(Self {
            t2i: t2i_client,
            reward: reward_client,
            embed: embed_client,
            llm: llm_client,
            stats,
        })
    }

    /// All-mock set with zero retry delay.
    pub fn mock(seed: u64) -> Self {
        let ep = BackendEndpoint::mock(seed);
        Self::from_endpoints(&ep, &ep, &ep, &ep).expect("mock backends are infallible to build")
    }

    /// Logical calls made so far, summed over all services.
    pub fn total_calls(&self) -> u64 {
        self.stats.iter().map(|(_, s)| s.calls()).sum()
    }

    pub fn calls_by_service(&self) -> Vec<(&'static str, u64)> {
        self.stats.iter().map(|(n, s)| (*n, s.calls())).collect()
    }
}

fn guarded<B: 'static>(
    inner: B,
    ep: &BackendEndpoint,
    name: &'static str,
    stats: &mut Vec<(&'static str, Arc<CallStats>)>,
) -> Arc<Guarded<B>> {
    let g = Guarded::new(inner, ep.retry_policy(), ep.max_in_flight);
    stats.push((name, g.stats()));
    Arc::new(g)
}

/// Strips control characters, surrounding quotes and whitespace from a model
/// reply and caps it at `max_words` words. Returns the text and whether it
/// was truncated.
pub fn sanitize_reply(raw: &str, max_words: usize) -> (String, bool) {
    let flat: String = raw
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    let mut s = flat.trim();
    loop {
        let stripped = s
            .trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '`'))
            .trim();
        if stripped == s {
            break;
        }
        s = stripped;
    }
    let words: Vec<&str> = s.split_whitespace().collect();
    let truncated = words.len() > max_words;
    (words[..words.len().min(max_words)].join(" "), truncated)
}

//! Model backends: text generation, entailment classification and text
//! embedding behind one cached, rate-limited, retrying call path.
//!
//! A [`Backend`] pairs a [`BackendDescriptor`] with a [`Transport`]. Every
//! request is canonicalized to JSON with sorted keys and hashed together with
//! the backend id; the hash is the cache key. With a warm cache the transport
//! is never touched, which is what makes pipeline stages replayable offline.

mod cache;
mod http;
mod limiter;
mod mock;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::error::{Error, Result};
use crate::model::NliLabel;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{decide_label, HttpTransport};
pub use limiter::TokenBucket;
pub use mock::{prompt_hash, ClassifierFixture, MockClassifier, MockEmbedder, MockGenerator};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("backend {backend_id} failed on request {key} after {attempts} attempt(s): {message}")]
    Transport { backend_id: String, key: String, attempts: u32, message: String },

    #[error("no fixture for request {key} ({detail})")]
    NoFixture { key: String, detail: String },

    #[error("malformed response from {backend_id} for request {key}: {message}")]
    Response { backend_id: String, key: String, message: String },

    #[error("integrity error in backend {backend_id}: {message}")]
    Integrity { backend_id: String, message: String },

    #[error("cache error: {0}")]
    Cache(String),
}

/// Failure reported by a transport for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: connection failures, 5xx, 429.
    Retryable(String),
    Fatal(String),
    MissingCredential(String),
    NoFixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adapter {
    Mock,
    OpenaiChat,
    NliHttp,
    OpenaiEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

fn default_max_tokens() -> u32 {
    512
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: 0.0, max_tokens: default_max_tokens(), model: None }
    }
}

/// Where and how to reach one backend. The derived [`backend_id`] changes
/// whenever the adapter, endpoint or parameters change.
///
/// [`backend_id`]: BackendDescriptor::backend_id
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub adapter: Adapter,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default)]
    pub params: GenerationParams,
}

impl BackendDescriptor {
    pub fn mock(name: &str) -> Self {
        BackendDescriptor {
            name: name.to_string(),
            adapter: Adapter::Mock,
            endpoint: String::new(),
            auth_env_var: None,
            params: GenerationParams::default(),
        }
    }

    pub fn backend_id(&self) -> String {
        let identity = serde_json::json!({
            "adapter": self.adapter,
            "endpoint": self.endpoint,
            "params": self.params,
        });
        let digest = Sha256::digest(identity.to_string().as_bytes());
        format!("{}@{}", self.name, &hex::encode(digest)[..8])
    }
}

/// A canonical backend request. Serialized with sorted keys for hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BackendRequest {
    Generate { prompt: String },
    Classify { premise: String, hypothesis: String },
    Embed { text: String },
}

impl BackendRequest {
    /// JSON text with object keys in sorted order.
    pub fn canonical_payload(&self) -> String {
        // serde_json's default map is ordered, so round-tripping through Value sorts keys.
        let value = serde_json::to_value(self).expect("request serializes");
        value.to_string()
    }

    pub fn cache_key(&self, backend_id: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(backend_id.as_bytes());
        hasher.update(b"\n");
        hasher.update(self.canonical_payload().as_bytes());
        hex::encode(hasher.finalize())
    }
}

#[async_trait]
pub trait Transport: Send + Sync {
    /// Performs one attempt. Responses are JSON values: a string for
    /// generation, a label string for classification, an array for embeddings.
    async fn send(&self, request: &BackendRequest) -> std::result::Result<Value, TransportError>;
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub parallelism: usize,
    /// Requests per second; `None` disables rate limiting.
    pub rate_per_sec: Option<f64>,
    pub burst: u32,
    pub retry: RetryPolicy,
}

impl Default for BackendOptions {
    fn default() -> Self {
        BackendOptions { parallelism: 8, rate_per_sec: None, burst: 8, retry: RetryPolicy::default() }
    }
}

pub struct Backend {
    descriptor: BackendDescriptor,
    backend_id: String,
    transport: Arc<dyn Transport>,
    cache: Option<Arc<ResponseCache>>,
    permits: Semaphore,
    limiter: Option<TokenBucket>,
    retry: RetryPolicy,
    embed_dim: AtomicUsize,
    transport_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend").field("backend_id", &self.backend_id).finish()
    }
}

impl Backend {
    pub fn new(
        descriptor: BackendDescriptor,
        transport: Arc<dyn Transport>,
        cache: Option<Arc<ResponseCache>>,
        options: BackendOptions,
    ) -> Self {
        let backend_id = descriptor.backend_id();
        Backend {
            descriptor,
            backend_id,
            transport,
            cache,
            permits: Semaphore::new(options.parallelism.max(1)),
            limiter: options.rate_per_sec.map(|rate| TokenBucket::new(rate, options.burst.max(1))),
            retry: options.retry,
            embed_dim: AtomicUsize::new(0),
            transport_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Builds an HTTP backend from its descriptor. Mock descriptors are
    /// rejected here; mocks are constructed with their fixtures directly.
    pub fn http(
        descriptor: BackendDescriptor,
        cache: Option<Arc<ResponseCache>>,
        options: BackendOptions,
    ) -> Result<Self> {
        let transport = HttpTransport::new(&descriptor)?;
        Ok(Backend::new(descriptor, Arc::new(transport), cache, options))
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// Number of requests that reached the transport (cache misses).
    pub fn transport_calls(&self) -> u64 {
        self.transport_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub async fn generate(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Precondition("prompt must be non-empty".into()));
        }
        let request = BackendRequest::Generate { prompt: prompt.to_string() };
        let (key, value) = self.call(&request).await?;
        value.as_str().map(str::to_string).ok_or_else(|| self.malformed(&key, "expected a string completion"))
    }

    pub async fn classify_entailment(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(Error::Precondition("premise and hypothesis must be non-empty".into()));
        }
        let request = BackendRequest::Classify { premise: premise.to_string(), hypothesis: hypothesis.to_string() };
        let (key, value) = self.call(&request).await?;
        value
            .as_str()
            .and_then(|s| s.parse::<NliLabel>().ok())
            .ok_or_else(|| self.malformed(&key, "expected one of e/n/c"))
    }

    pub async fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Precondition("text to embed must be non-empty".into()));
        }
        let request = BackendRequest::Embed { text: text.to_string() };
        let (key, value) = self.call(&request).await?;
        let vector: Vec<f64> = value
            .as_array()
            .and_then(|items| items.iter().map(Value::as_f64).collect())
            .ok_or_else(|| self.malformed(&key, "expected an array of numbers"))?;
        if vector.is_empty() {
            return Err(self.malformed(&key, "empty embedding"));
        }
        match self.embed_dim.compare_exchange(0, vector.len(), Ordering::SeqCst, Ordering::SeqCst) {
            Ok(_) => {}
            Err(dim) if dim == vector.len() => {}
            Err(dim) => {
                return Err(BackendError::Integrity {
                    backend_id: self.backend_id.clone(),
                    message: format!("embedding dimension changed from {dim} to {}", vector.len()),
                }
                .into())
            }
        }
        Ok(vector)
    }

    fn malformed(&self, key: &str, message: &str) -> Error {
        BackendError::Response { backend_id: self.backend_id.clone(), key: key.to_string(), message: message.into() }
            .into()
    }

    async fn call(&self, request: &BackendRequest) -> Result<(String, Value)> {
        let key = request.cache_key(&self.backend_id);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok((key, entry.response));
            }
        }

        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire().await;
            }
            self.transport_calls.fetch_add(1, Ordering::Relaxed);
            match self.transport.send(request).await {
                Ok(value) => break value,
                Err(TransportError::Retryable(message)) if attempt < self.retry.attempts => {
                    log::warn!("{}: attempt {attempt} failed ({message}), retrying", self.backend_id);
                    tokio::time::sleep(self.retry.base_delay * 2u32.pow(attempt - 1)).await;
                }
                Err(TransportError::Retryable(message)) | Err(TransportError::Fatal(message)) => {
                    return Err(BackendError::Transport {
                        backend_id: self.backend_id.clone(),
                        key,
                        attempts: attempt,
                        message,
                    }
                    .into())
                }
                Err(TransportError::MissingCredential(var)) => {
                    return Err(BackendError::Config(format!(
                        "credential environment variable {var} is not set for backend {}",
                        self.backend_id
                    ))
                    .into())
                }
                Err(TransportError::NoFixture(detail)) => return Err(BackendError::NoFixture { key, detail }.into()),
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key: key.clone(),
                backend_id: self.backend_id.clone(),
                request: serde_json::to_value(request)?,
                response: response.clone(),
                created_at: chrono::Utc::now().to_rfc3339(),
            })?;
        }
        Ok((key, response))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Transport that replays a scripted list of outcomes.
    struct Scripted {
        outcomes: Mutex<Vec<std::result::Result<Value, TransportError>>>,
    }

    #[async_trait]
    impl Transport for Scripted {
        async fn send(&self, _request: &BackendRequest) -> std::result::Result<Value, TransportError> {
            self.outcomes.lock().unwrap().remove(0)
        }
    }

    fn fast_options() -> BackendOptions {
        BackendOptions { retry: RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) }, ..Default::default() }
    }

    fn scripted(outcomes: Vec<std::result::Result<Value, TransportError>>, cache: Option<Arc<ResponseCache>>) -> Backend {
        Backend::new(
            BackendDescriptor::mock("gen:test"),
            Arc::new(Scripted { outcomes: Mutex::new(outcomes) }),
            cache,
            fast_options(),
        )
    }

    #[test]
    fn canonical_payload_sorts_keys() {
        let req = BackendRequest::Classify { premise: "p".into(), hypothesis: "h".into() };
        assert_eq!(req.canonical_payload(), r#"{"hypothesis":"h","op":"classify","premise":"p"}"#);
    }

    #[test]
    fn backend_id_tracks_endpoint_and_params() {
        let a = BackendDescriptor::mock("gen:x");
        let mut b = a.clone();
        b.endpoint = "http://localhost:1".into();
        let mut c = a.clone();
        c.params.temperature = 0.01;
        assert_ne!(a.backend_id(), b.backend_id());
        assert_ne!(a.backend_id(), c.backend_id());
        assert_eq!(a.backend_id(), BackendDescriptor::mock("gen:x").backend_id());
        assert!(a.backend_id().starts_with("gen:x@"));
    }

    #[tokio::test]
    async fn retries_transient_failures() {
        let backend = scripted(
            vec![Err(TransportError::Retryable("503".into())), Ok(Value::String("ok".into()))],
            None,
        );
        assert_eq!(backend.generate("hi").await.unwrap(), "ok");
        assert_eq!(backend.transport_calls(), 2);
    }

    #[tokio::test]
    async fn gives_up_after_bounded_attempts_with_request_key() {
        let backend = scripted(vec![Err(TransportError::Retryable("down".into())); 3], None);
        let err = backend.generate("hi").await.unwrap_err();
        assert!(err.is_backend());
        let key = BackendRequest::Generate { prompt: "hi".into() }.cache_key(backend.backend_id());
        assert!(err.to_string().contains(&key), "{err}");
        assert!(err.to_string().contains("3 attempt"));
        assert_eq!(backend.transport_calls(), 3);
    }

    #[tokio::test]
    async fn fatal_errors_are_not_retried() {
        let backend = scripted(vec![Err(TransportError::Fatal("400".into()))], None);
        assert!(backend.generate("hi").await.is_err());
        assert_eq!(backend.transport_calls(), 1);
    }

    #[tokio::test]
    async fn missing_credential_is_a_configuration_error() {
        let backend = scripted(vec![Err(TransportError::MissingCredential("API_KEY".into()))], None);
        let err = backend.generate("hi").await.unwrap_err();
        assert!(err.to_string().contains("configuration error"));
        assert!(err.to_string().contains("API_KEY"));
    }

    #[tokio::test]
    async fn embedding_dimension_must_not_change() {
        let backend = scripted(
            vec![Ok(serde_json::json!([1.0, 0.0])), Ok(serde_json::json!([1.0, 0.0, 0.0]))],
            None,
        );
        backend.embed("a").await.unwrap();
        let err = backend.embed("b").await.unwrap_err();
        assert!(err.to_string().contains("dimension"));
    }

    #[tokio::test]
    async fn empty_inputs_are_precondition_errors() {
        let backend = scripted(vec![], None);
        assert!(matches!(backend.embed("").await, Err(Error::Precondition(_))));
        assert!(matches!(backend.generate("  ").await, Err(Error::Precondition(_))));
        assert!(matches!(backend.classify_entailment("", "x").await, Err(Error::Precondition(_))));
    }

    #[tokio::test]
    async fn warm_cache_skips_transport() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let backend = scripted(vec![Ok(Value::String("answer".into()))], Some(cache.clone()));
        assert_eq!(backend.generate("q").await.unwrap(), "answer");
        assert_eq!(backend.generate("q").await.unwrap(), "answer");
        assert_eq!(backend.transport_calls(), 1);
        assert_eq!(backend.cache_hits(), 1);

        // A fresh backend over the same directory never touches its transport.
        let replay = scripted(vec![], Some(cache));
        assert_eq!(replay.generate("q").await.unwrap(), "answer");
        assert_eq!(replay.transport_calls(), 0);
    }
}

//! Uniform chat-completion client over HTTP, replay stores and scripted mocks,
//! with a content-addressed response cache in front.

mod http;
mod request;
mod store;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{
    completions_url, error_message, extract_content, wire_body, HttpReply, Transport, TransportError, UreqTransport,
};
pub use request::{request_digest, ChatRequest, ImageSource, Message, Part, Role};
pub use store::{resolve_cache_dir, ResponseStore, StoreStats, CACHE_DIR_ENV, DEFAULT_CACHE_DIR};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("upstream error (status {status}): {message}")]
    Upstream { status: u16, message: String },
    #[error("no scripted response for digest {0}")]
    ReplayMiss(String),
    #[error("malformed upstream response: {0}")]
    Malformed(String),
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("response store: {0}")]
    Store(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
    ScriptedMock,
}

/// Configuration for one backend. Concrete models are configuration, not code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_dir: Option<PathBuf>,
    /// Fixed reply for a config-defined scripted mock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo: Option<String>,
}

impl BackendSpec {
    pub fn new(backend_id: impl Into<String>, kind: BackendKind, model: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind,
            base_url: None,
            model: model.into(),
            temperature: 0.0,
            max_tokens: 256,
            api_key_env: None,
            replay_dir: None,
            echo: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: String| Err(GatewayError::InvalidSpec(m));
        if self.backend_id.is_empty() {
            return invalid("backend_id is empty".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid(format!("{}: temperature must be >= 0", self.backend_id));
        }
        if self.max_tokens == 0 {
            return invalid(format!("{}: max_tokens must be > 0", self.backend_id));
        }
        match self.kind {
            BackendKind::Http if self.base_url.as_deref().is_none_or(str::is_empty) => {
                invalid(format!("{}: http backend requires base_url", self.backend_id))
            }
            BackendKind::Replay if self.replay_dir.is_none() => {
                invalid(format!("{}: replay backend requires replay_dir", self.backend_id))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub request_digest: String,
    pub from_cache: bool,
    pub latency_ms: u64,
    /// Upstream returned empty or null content.
    pub upstream_empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay.saturating_mul(1 << attempt.min(16));
        if self.jitter {
            base.mul_f64(rand::rng().random_range(0.5..1.5))
        } else {
            base
        }
    }
}

/// Reply function for scripted mocks.
pub type Responder = Arc<dyn Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync>;

/// Anything that can answer a chat request. The pipeline only sees this.
pub trait ChatBackend: Send + Sync {
    fn spec(&self) -> &BackendSpec;
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

enum Driver {
    Http,
    Replay(ResponseStore),
    Mock(Responder),
}

/// A configured backend: spec, driver, optional cache and retry policy.
///
/// Safe to share across threads. The only shared mutable state is the call
/// counter and the cache, which serializes its own writes.
pub struct Gateway {
    spec: BackendSpec,
    driver: Driver,
    transport: Arc<dyn Transport>,
    cache: Option<Arc<ResponseStore>>,
    retry: RetryPolicy,
    calls: AtomicUsize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("spec", &self.spec)
            .field("calls", &self.calls.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Builds the driver named by `spec.kind`. Config-defined scripted mocks
    /// reply with `spec.echo`.
    pub fn from_spec(spec: BackendSpec) -> Result<Self, GatewayError> {
        spec.validate()?;
        let driver = match spec.kind {
            BackendKind::Http => Driver::Http,
            BackendKind::Replay => Driver::Replay(ResponseStore::new(spec.replay_dir.clone().expect("validated"))),
            BackendKind::ScriptedMock => {
                let echo = spec.echo.clone().unwrap_or_default();
                Driver::Mock(Arc::new(move |_| Ok(echo.clone())))
            }
        };
        Ok(Self::with_driver(spec, driver))
    }

    /// Scripted mock backed by an arbitrary responder.
    pub fn mock<F>(spec: BackendSpec, responder: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        let mut spec = spec;
        spec.kind = BackendKind::ScriptedMock;
        Self::with_driver(spec, Driver::Mock(Arc::new(responder)))
    }

    fn with_driver(spec: BackendSpec, driver: Driver) -> Self {
        Self {
            spec,
            driver,
            transport: Arc::new(UreqTransport::default()),
            cache: None,
            retry: RetryPolicy::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_cache(mut self, cache: Arc<ResponseStore>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Requests that reached the driver (cache hits excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn drive(&self, req: &ChatRequest, digest: &str) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.driver {
            Driver::Replay(store) => store
                .get(digest)?
                .ok_or_else(|| GatewayError::ReplayMiss(digest.to_string())),
            Driver::Mock(responder) => responder(req),
            Driver::Http => self.http_complete(req),
        }
    }

    fn http_complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let url = completions_url(self.spec.base_url.as_deref().unwrap_or_default());
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(var) = &self.spec.api_key_env {
            let key = std::env::var(var).map_err(|_| GatewayError::MissingCredentials(var.clone()))?;
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let body = wire_body(req);

        let attempts = self.retry.attempts.max(1);
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.transport.post_json(&url, &headers, &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return extract_content(&reply.body).map_err(GatewayError::Malformed);
                }
                Ok(reply) => {
                    if let Some(message) = error_message(&reply.body) {
                        return Err(GatewayError::Upstream {
                            status: reply.status,
                            message,
                        });
                    }
                    last_failure = format!("status {} without error body", reply.status);
                }
                Err(TransportError(e)) => last_failure = e,
            }
            log::debug!(
                "{}: attempt {}/{} failed: {last_failure}",
                self.spec.backend_id,
                attempt + 1,
                attempts
            );
        }
        Err(GatewayError::Unreachable(format!(
            "{} after {attempts} attempts: {last_failure}",
            url
        )))
    }
}

impl ChatBackend for Gateway {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    /// Replay backends bypass the cache; they already are a response store.
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let started = Instant::now();
        let digest = request_digest(req);
        let cache = match self.driver {
            Driver::Replay(_) => None,
            _ => self.cache.as_deref(),
        };
        if let Some(cache) = cache {
            if let Some(text) = cache.get(&digest)? {
                return Ok(ChatResponse {
                    upstream_empty: text.is_empty(),
                    text,
                    request_digest: digest,
                    from_cache: true,
                    latency_ms: started.elapsed().as_millis() as u64,
                });
            }
        }
        let text = self.drive(req, &digest)?;
        if let Some(cache) = cache {
            cache.put(&digest, &text)?;
        }
        Ok(ChatResponse {
            upstream_empty: text.is_empty(),
            text,
            request_digest: digest,
            from_cache: false,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

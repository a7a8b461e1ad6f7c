//! HTTP completion backend and backend configuration.
//!
//! Wire protocol: `POST endpoint` with JSON
//! `{"prompt": ..., "max_tokens": N, "temperature": 0, "logprobs": K}`;
//! the response carries one entry per generated position:
//! `{"steps": [{"token_id": 7, "logprobs": {"7": -0.01, "12": -4.5}}, ...]}`
//! where `logprobs` maps decimal token ids to natural-log probabilities of
//! the top-K tokens at that position. A target token missing from a step's
//! map is a protocol error (its probability is unknown, not zero).

use std::collections::BTreeMap;
use std::time::Duration;

use super::{BackendError, CompletionBackend, CompletionStep};

/// Which backend implementation a run should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BackendKind {
    HttpCompletion,
    SyntheticSoftmax,
}

/// Backend selection and limits, as stored in run configuration artifacts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Completion endpoint URL; HttpCompletion only.
    pub endpoint: Option<String>,
    /// Maximum concurrent candidates in flight.
    pub max_parallel: usize,
    /// Per-request timeout in seconds.
    pub timeout_seconds: f64,
    /// Name of the environment variable holding the bearer token. The token
    /// itself never appears in configuration or argv.
    pub auth_env: Option<String>,
    /// Retries after the first failed attempt (HTTP backend only).
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// First retry delay in milliseconds; doubles per retry (HTTP only).
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_retries() -> usize {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

impl BackendDescriptor {
    pub fn synthetic() -> Self {
        BackendDescriptor {
            kind: BackendKind::SyntheticSoftmax,
            endpoint: None,
            max_parallel: 4,
            timeout_seconds: 30.0,
            auth_env: None,
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        BackendDescriptor {
            kind: BackendKind::HttpCompletion,
            endpoint: Some(endpoint.into()),
            max_parallel: 4,
            timeout_seconds: 30.0,
            auth_env: None,
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_parallel < 1 {
            return Err("max_parallel must be at least 1".into());
        }
        if self.timeout_seconds.is_nan() || self.timeout_seconds <= 0.0 {
            return Err("timeout_seconds must be positive".into());
        }
        if self.kind == BackendKind::HttpCompletion && self.endpoint.is_none() {
            return Err("an HTTP backend needs an endpoint URL".into());
        }
        Ok(())
    }
}

/// Connection settings for [`HttpCompletionBackend`].
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Environment variable that holds the bearer token, if auth is needed.
    pub auth_env: Option<String>,
    /// Top-K size requested via the "logprobs" field.
    pub logprobs_k: usize,
    /// Retries after the first failed attempt.
    pub retries: usize,
    /// First retry delay; doubles on each subsequent retry.
    pub backoff_start: Duration,
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpBackendConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            auth_env: None,
            logprobs_k: 100,
            retries: 3,
            backoff_start: Duration::from_secs(1),
        }
    }

    pub fn from_descriptor(descriptor: &BackendDescriptor) -> Result<Self, BackendError> {
        let endpoint = descriptor.endpoint.clone().ok_or_else(|| {
            BackendError::BackendUnavailable("no endpoint configured for the HTTP backend".into())
        })?;
        let mut config = HttpBackendConfig::new(endpoint);
        config.timeout = Duration::from_secs_f64(descriptor.timeout_seconds);
        config.auth_env = descriptor.auth_env.clone();
        config.retries = descriptor.retries;
        config.backoff_start = Duration::from_millis(descriptor.backoff_ms);
        Ok(config)
    }
}

#[derive(serde::Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    logprobs: usize,
}

#[derive(serde::Deserialize)]
struct CompletionResponse {
    steps: Vec<ResponseStep>,
}

#[derive(serde::Deserialize)]
struct ResponseStep {
    token_id: u32,
    logprobs: BTreeMap<String, f64>,
}

enum AttemptError {
    /// Worth retrying: connection failures, timeouts, non-2xx statuses.
    Transient(BackendError),
    /// Not worth retrying: the endpoint answered but the answer is unusable.
    Fatal(BackendError),
}

/// Blocking HTTP client for the completion protocol. Safe to share across
/// verification workers.
pub struct HttpCompletionBackend {
    client: reqwest::blocking::Client,
    config: HttpBackendConfig,
    auth_token: Option<String>,
}

impl std::fmt::Debug for HttpCompletionBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpCompletionBackend")
            .field("config", &self.config)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

impl HttpCompletionBackend {
    /// Builds the client and resolves the auth token from the environment
    /// variable named in the config (never from argv).
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let auth_token = match &config.auth_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::BackendUnavailable(format!(
                    "auth environment variable {var} is not set"
                ))
            })?),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::BackendUnavailable(format!("http client setup: {e}")))?;
        Ok(HttpCompletionBackend { client, config, auth_token })
    }

    fn attempt(&self, request: &CompletionRequest<'_>) -> Result<CompletionResponse, AttemptError> {
        let mut builder = self.client.post(&self.config.endpoint).json(request);
        if let Some(token) = &self.auth_token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                AttemptError::Transient(BackendError::Timeout {
                    seconds: self.config.timeout.as_secs_f64(),
                })
            } else {
                AttemptError::Transient(BackendError::BackendUnavailable(e.to_string()))
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(AttemptError::Transient(BackendError::BackendUnavailable(format!(
                "endpoint returned HTTP {status}"
            ))));
        }
        response.json().map_err(|e| {
            AttemptError::Fatal(BackendError::ProtocolError(format!(
                "response body did not match the completion protocol: {e}"
            )))
        })
    }

    fn post_with_retries(
        &self,
        request: &CompletionRequest<'_>,
    ) -> Result<CompletionResponse, BackendError> {
        let mut backoff = self.config.backoff_start;
        let mut last_transient = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff = backoff.saturating_mul(2);
            }
            match self.attempt(request) {
                Ok(response) => return Ok(response),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(e)) => {
                    log::debug!("completion attempt {attempt} failed: {e}");
                    last_transient = Some(e);
                }
            }
        }
        Err(last_transient.expect("loop ran at least once"))
    }
}

impl CompletionBackend for HttpCompletionBackend {
    fn complete(
        &self,
        prompt: &str,
        n_steps: usize,
        target_id: u32,
    ) -> Result<Vec<CompletionStep>, BackendError> {
        let request = CompletionRequest {
            prompt,
            max_tokens: n_steps,
            temperature: 0.0,
            logprobs: self.config.logprobs_k,
        };
        let response = self.post_with_retries(&request)?;
        let key = target_id.to_string();
        response
            .steps
            .into_iter()
            .enumerate()
            .map(|(position, step)| {
                let logprob = step.logprobs.get(&key).ok_or_else(|| {
                    BackendError::ProtocolError(format!(
                        "step {position} omits the target token {target_id} (top-{} cutoff); \
                         its probability is unknown",
                        self.config.logprobs_k
                    ))
                })?;
                Ok(CompletionStep {
                    position,
                    chosen_id: step.token_id,
                    // Log probabilities convert by exponentiation in f64.
                    target_probability: logprob.exp(),
                })
            })
            .collect()
    }
}

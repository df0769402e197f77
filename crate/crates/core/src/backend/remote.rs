use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::wire::{WireError, WireHealth, WireRequest, WireResponse, HEALTH_PATH, SCORE_PATH};
use super::{BackendError, ScoreRequest, ScoreResponse, ScoringBackend};

/// Overrides the configured remote endpoint when set.
pub const BACKEND_URL_ENV: &str = "CPT_BACKEND_URL";

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    /// Extra attempts after a retryable failure.
    pub max_retries: u32,
    /// Delay before the first retry; doubles for each further one.
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub max_idle_connections: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            max_retries: 3,
            initial_backoff: Duration::from_millis(100),
            timeout: Duration::from_secs(30),
            max_idle_connections: 8,
        }
    }

    /// `CPT_BACKEND_URL` if set, else `fallback`.
    pub fn from_env_or(fallback: Option<&str>) -> Option<Self> {
        std::env::var(BACKEND_URL_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .or_else(|| fallback.map(str::to_string))
            .map(Self::new)
    }
}

/// Blocking HTTP client for a scoring server. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: Client,
}

/// Outcome of a single HTTP exchange.
enum Attempt {
    Done(Result<WireResponse, BackendError>),
    /// Failure worth retrying; reported as-is once retries run out.
    Retry(BackendError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .pool_max_idle_per_host(config.max_idle_connections)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn health(&self) -> Result<WireHealth, BackendError> {
        let url = format!("{}{HEALTH_PATH}", self.config.endpoint);
        let resp = self
            .client
            .get(&url)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!(
                "health check returned {status}"
            )));
        }
        serde_json::from_slice(&body)
            .map_err(|e| BackendError::Protocol(format!("health body: {e}")))
    }

    fn attempt(&self, url: &str, body: &[u8]) -> Attempt {
        let resp = match self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send()
        {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = resp.status();
        let bytes = match resp.bytes() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let server_message = || {
            serde_json::from_slice::<WireError>(&bytes)
                .map(|e| e.error)
                .ok()
        };
        if status.is_success() {
            return Attempt::Done(
                serde_json::from_slice(&bytes)
                    .map_err(|e| BackendError::Protocol(format!("response body: {e}"))),
            );
        }
        if status.is_server_error() {
            return Attempt::Retry(match (status, server_message()) {
                (StatusCode::INTERNAL_SERVER_ERROR, Some(msg)) => BackendError::ModelFailure(msg),
                _ => BackendError::Transport(format!("server returned {status}")),
            });
        }
        Attempt::Done(Err(BackendError::Protocol(format!(
            "server returned {status}: {}",
            server_message().unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned())
        ))))
    }
}

impl ScoringBackend for RemoteBackend {
    fn backend_id(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }

    /// Server errors and connection failures are retried with exponential
    /// backoff. A server-reported model failure that persists through every
    /// retry surfaces as `ModelFailure`, anything else as `Transport`.
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        request.validate()?;
        let body = WireRequest::encode(request)?.to_body();
        let url = format!("{}{SCORE_PATH}", self.config.endpoint);
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 0;
        let wire = loop {
            match self.attempt(&url, &body) {
                Attempt::Done(result) => break result?,
                Attempt::Retry(err) if attempt >= self.config.max_retries => return Err(err),
                Attempt::Retry(_) => {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
            }
        };
        let response = ScoreResponse::from(wire);
        response.validate_for(request)?;
        Ok(response)
    }
}

//! The masked-token scoring contract and its built-in implementations.

mod oracle;
mod remote;
mod stub;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::prompt::{CandidateTokenSeq, PromptText};
use crate::raster::RasterImage;
use crate::scoring::{MaskDistribution, ScoringError};

pub use oracle::{ChromaticOracle, DEFAULT_DISTANCE_SCALE, DEFAULT_NONE_LOGIT, ORACLE_BACKGROUND};
pub use remote::{RemoteBackend, RemoteConfig, BACKEND_URL_ENV};
pub use stub::{stub_logit, HashStub};

/// Allowed deviation of a slot's probability mass from 1.
pub const RESPONSE_TOLERANCE: f64 = 1e-6;

/// Meta key holding the oracle's target box as `x,y,w,h`.
pub const META_TARGET_BOX: &str = "target_box";
/// Meta key holding the overlay transparency.
pub const META_ALPHA: &str = "alpha";
pub const META_INSTANCE: &str = "instance_id";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("model failure: {0}")]
    ModelFailure(String),
    #[error("request meta has no {0:?} entry")]
    MissingMeta(String),
}

impl BackendError {
    pub fn retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// One forward pass: an image, a prompt with mask slots and the candidates
/// each slot is restricted to.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRequest {
    pub image: RasterImage,
    pub prompt: String,
    pub mask_count: usize,
    pub candidates: Vec<Vec<CandidateTokenSeq>>,
    pub meta: BTreeMap<String, String>,
}

impl ScoreRequest {
    pub fn new(
        image: RasterImage,
        prompt: &PromptText,
        candidates: Vec<Vec<CandidateTokenSeq>>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self, BackendError> {
        let req = Self {
            image,
            prompt: prompt.render(),
            mask_count: prompt.mask_count(),
            candidates,
            meta,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let protocol = |m: String| Err(BackendError::Protocol(m));
        if self.mask_count == 0 {
            return protocol("mask_count must be at least 1".into());
        }
        if self.candidates.len() != self.mask_count {
            return protocol(format!(
                "{} candidate lists for {} mask slots",
                self.candidates.len(),
                self.mask_count
            ));
        }
        for (slot, cands) in self.candidates.iter().enumerate() {
            if cands.is_empty() {
                return protocol(format!("slot {slot} has no candidates"));
            }
            let mut seen = BTreeSet::new();
            for c in cands {
                if c.tokens.is_empty() || c.label.is_empty() {
                    return protocol(format!("slot {slot} has an empty candidate"));
                }
                if !seen.insert(c.label.as_str()) {
                    return protocol(format!("slot {slot} repeats candidate {:?}", c.label));
                }
            }
        }
        Ok(())
    }

    pub fn meta_value(&self, key: &str) -> Result<&str, BackendError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| BackendError::MissingMeta(key.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResponse {
    pub per_slot_logprobs: Vec<BTreeMap<String, f64>>,
    pub backend_id: String,
    pub latency_ms: u64,
}

impl ScoreResponse {
    /// Checks the response covers exactly the request's slots and
    /// candidates and that every slot is normalized.
    pub fn validate_for(&self, request: &ScoreRequest) -> Result<(), BackendError> {
        if self.per_slot_logprobs.len() != request.mask_count {
            return Err(BackendError::Protocol(format!(
                "response has {} slots, request {}",
                self.per_slot_logprobs.len(),
                request.mask_count
            )));
        }
        for (slot, (got, asked)) in self
            .per_slot_logprobs
            .iter()
            .zip(&request.candidates)
            .enumerate()
        {
            let asked: BTreeSet<&str> = asked.iter().map(|c| c.label.as_str()).collect();
            let labels: BTreeSet<&str> = got.keys().map(String::as_str).collect();
            if labels != asked {
                return Err(BackendError::Protocol(format!(
                    "slot {slot} labels {labels:?} differ from candidates {asked:?}"
                )));
            }
            if let Some((label, _)) = got
                .iter()
                .find(|(_, v)| v.is_nan() || **v > RESPONSE_TOLERANCE)
            {
                return Err(BackendError::Protocol(format!(
                    "slot {slot} log-probability for {label:?} is not a log-probability"
                )));
            }
        }
        self.distribution().map(|_| ())
    }

    pub fn distribution(&self) -> Result<MaskDistribution, BackendError> {
        MaskDistribution::from_logprobs(self.per_slot_logprobs.clone(), RESPONSE_TOLERANCE)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

/// Builds a response from per-slot logits by restricted softmax.
pub(crate) fn response_from_logits(
    logits: &[Vec<(String, f64)>],
    backend_id: &str,
) -> Result<ScoreResponse, BackendError> {
    let dist = MaskDistribution::from_logits(logits)
        .map_err(|e: ScoringError| BackendError::ModelFailure(e.to_string()))?;
    Ok(ScoreResponse {
        per_slot_logprobs: dist.slots().to_vec(),
        backend_id: backend_id.to_string(),
        latency_ms: 0,
    })
}

/// A masked-token scorer. Implementations must tolerate concurrent calls.
pub trait ScoringBackend: Send + Sync {
    fn backend_id(&self) -> String;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for &T {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(request)
    }
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for Box<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(request)
    }
}

/// Wraps a backend and counts the score calls it receives.
pub struct CallCounter<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> CallCounter<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) -> usize {
        self.calls.swap(0, Ordering::SeqCst)
    }
}

impl<B: ScoringBackend> ScoringBackend for CallCounter<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(request)
    }
}

//! JSON bodies of the HTTP scoring protocol.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::prompt::CandidateTokenSeq;
use crate::raster::RasterImage;

use super::{BackendError, ScoreRequest, ScoreResponse};

pub const SCORE_PATH: &str = "/v1/score";
pub const HEALTH_PATH: &str = "/v1/health";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub image_png_b64: String,
    pub prompt: String,
    pub mask_count: usize,
    pub candidates: Vec<Vec<CandidateTokenSeq>>,
    pub meta: BTreeMap<String, String>,
}

impl WireRequest {
    pub fn encode(request: &ScoreRequest) -> Result<Self, BackendError> {
        let png = request
            .image
            .to_png_bytes()
            .map_err(|e| BackendError::Protocol(format!("image encoding: {e}")))?;
        Ok(Self {
            image_png_b64: STANDARD.encode(png),
            prompt: request.prompt.clone(),
            mask_count: request.mask_count,
            candidates: request.candidates.clone(),
            meta: request.meta.clone(),
        })
    }

    pub fn decode(self) -> Result<ScoreRequest, BackendError> {
        let png = STANDARD
            .decode(self.image_png_b64.as_bytes())
            .map_err(|e| BackendError::Protocol(format!("image_png_b64: {e}")))?;
        let image = RasterImage::from_png_bytes(&png)
            .map_err(|e| BackendError::Protocol(format!("image_png_b64: {e}")))?;
        let request = ScoreRequest {
            image,
            prompt: self.prompt,
            mask_count: self.mask_count,
            candidates: self.candidates,
            meta: self.meta,
        };
        request.validate()?;
        Ok(request)
    }

    /// Compact JSON in field declaration order.
    pub fn to_body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("wire request serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub per_slot_logprobs: Vec<BTreeMap<String, f64>>,
    pub backend_id: String,
    pub latency_ms: u64,
}

impl From<ScoreResponse> for WireResponse {
    fn from(r: ScoreResponse) -> Self {
        Self {
            per_slot_logprobs: r.per_slot_logprobs,
            backend_id: r.backend_id,
            latency_ms: r.latency_ms,
        }
    }
}

impl From<WireResponse> for ScoreResponse {
    fn from(r: WireResponse) -> Self {
        Self {
            per_slot_logprobs: r.per_slot_logprobs,
            backend_id: r.backend_id,
            latency_ms: r.latency_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireHealth {
    pub backend_id: String,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
}

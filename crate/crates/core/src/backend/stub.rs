use sha2::{Digest, Sha256};

use super::{response_from_logits, BackendError, ScoreRequest, ScoreResponse, ScoringBackend};

/// Logit the hash stub assigns to `label` under `prompt`: the first eight
/// bytes of SHA-256 over `prompt`, a newline and `label`, read big-endian
/// and divided by 2^64.
pub fn stub_logit(prompt: &str, label: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update(b"\n");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head) as f64 / 18_446_744_073_709_551_616.0
}

/// In-process twin of the bridge's stub mode. Ignores the image.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashStub;

impl ScoringBackend for HashStub {
    fn backend_id(&self) -> String {
        "stub".into()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        request.validate()?;
        let logits: Vec<Vec<(String, f64)>> = request
            .candidates
            .iter()
            .map(|slot| {
                slot.iter()
                    .map(|c| (c.label.clone(), stub_logit(&request.prompt, &c.label)))
                    .collect()
            })
            .collect();
        response_from_logits(&logits, &self.backend_id())
    }
}

use std::collections::BTreeMap;
use std::path::PathBuf;

use cpt_core::backend::wire::{WireRequest, WireResponse};
use cpt_core::backend::{HashStub, ScoreRequest, ScoringBackend};
use cpt_core::prompt::{grounding_template, CandidateTokenSeq};
use cpt_core::{RasterImage, Rgb};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden/wire")
        .join(name)
}

fn fixed_request() -> ScoreRequest {
    let pixels = vec![
        Rgb::new(128, 128, 128),
        Rgb::new(184, 64, 79),
        Rgb::new(0, 0, 0),
        Rgb::new(255, 255, 255),
        Rgb::new(12, 34, 56),
        Rgb::new(128, 128, 128),
    ];
    let meta: BTreeMap<String, String> = [
        ("alpha", "0.5"),
        ("instance_id", "scene00000"),
        ("target_box", "1,0,1,1"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    ScoreRequest::new(
        RasterImage::new(3, 2, pixels).unwrap(),
        &grounding_template("target 1").unwrap(),
        vec![["red", "purple", "none"]
            .iter()
            .map(|t| CandidateTokenSeq::single(*t))
            .collect()],
        meta,
    )
    .unwrap()
}

#[test]
fn request_serializes_to_golden_bytes() {
    let body = WireRequest::encode(&fixed_request()).unwrap().to_body();
    if std::env::var_os("CPT_REGEN_GOLDEN").is_some() {
        std::fs::write(golden("score_request.json"), &body).unwrap();
    }
    let want = std::fs::read(golden("score_request.json")).unwrap();
    assert_eq!(
        String::from_utf8(body).unwrap(),
        String::from_utf8(want).unwrap()
    );
}

#[test]
fn golden_request_decodes_to_the_fixed_request() {
    let wire: WireRequest =
        serde_json::from_slice(&std::fs::read(golden("score_request.json")).unwrap()).unwrap();
    assert_eq!(wire.decode().unwrap(), fixed_request());
}

#[test]
fn stub_matches_golden_response() {
    // The golden response was computed by a standalone script from the
    // documented hash, not by this crate.
    let want: WireResponse =
        serde_json::from_slice(&std::fs::read(golden("stub_response.json")).unwrap()).unwrap();
    let got = HashStub.score(&fixed_request()).unwrap();
    assert_eq!(got.backend_id, want.backend_id);
    assert_eq!(got.latency_ms, want.latency_ms);
    assert_eq!(got.per_slot_logprobs.len(), want.per_slot_logprobs.len());
    for (g, w) in got.per_slot_logprobs.iter().zip(&want.per_slot_logprobs) {
        assert_eq!(g.keys().collect::<Vec<_>>(), w.keys().collect::<Vec<_>>());
        for (label, lp) in g {
            assert!(
                (lp - w[label]).abs() < 1e-15,
                "{label}: {lp} vs {}",
                w[label]
            );
        }
    }
}

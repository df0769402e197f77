//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use cpt_core::dataio::{generate_synthetic_grounding, SynthConfig};
use cpt_core::evalkit::SplitMix64;
use cpt_core::raster::{BoundingBox, RasterImage, Region};

/// One synthetic scene ready for grounding.
pub struct Scene {
    pub image: RasterImage,
    pub regions: Vec<Region>,
    pub query: String,
    pub meta: BTreeMap<String, String>,
}

/// The first synthetic scene with exactly `k` proposals.
pub fn scene_with(k: usize, seed: u64) -> Scene {
    let data = generate_synthetic_grounding(&SynthConfig::new(64, k, seed));
    let (inst, image) = data
        .instances
        .into_iter()
        .zip(data.images)
        .find(|(inst, _)| inst.proposals.len() == k)
        .expect("some scene has the maximum proposal count");
    Scene {
        image,
        regions: inst
            .proposals
            .iter()
            .map(|p| Region::from_box(p.bbox))
            .collect(),
        query: inst.query,
        meta: inst.meta,
    }
}

/// `n` random boxes inside a `side`-pixel square.
pub fn random_boxes(n: usize, side: f64, seed: u64) -> Vec<BoundingBox> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let w = 4.0 + rng.next_f64() * side / 4.0;
            let h = 4.0 + rng.next_f64() * side / 4.0;
            let x = rng.next_f64() * (side - w);
            let y = rng.next_f64() * (side - h);
            BoundingBox::new(x, y, w, h).expect("positive box")
        })
        .collect()
}

/// `n` labelled random logits.
pub fn random_logits(n: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| (format!("t{i}"), rng.next_f64() * 40.0 - 20.0))
        .collect()
}

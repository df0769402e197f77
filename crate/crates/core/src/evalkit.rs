//! Evaluation protocol: box overlap, grounding accuracy, relation recall,
//! few-shot split sampling and multi-split aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::BoundingBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SPLITS: usize = 5;
pub const DEFAULT_VAL_SIZE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("pool of {available} ids cannot supply {requested} samples{}", class.as_ref().map(|c| format!(" for class {c:?}")).unwrap_or_default())]
    PoolTooSmall {
        requested: usize,
        available: usize,
        class: Option<String>,
    },
    #[error("pool contains duplicate id {0:?}")]
    DuplicateId(String),
    #[error("n_splits must be at least 1")]
    NoSplits,
    #[error("split {index} reports metrics {found:?}, expected {expected:?}")]
    MetricKeys {
        index: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// Intersection over union of two boxes, 0 when they do not overlap.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x() + a.w()).min(b.x() + b.w()) - a.x().max(b.x());
    let iy = (a.y() + a.h()).min(b.y() + b.h()) - a.y().max(b.y());
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of instances whose prediction exists and overlaps the gold box
/// with IoU strictly above `threshold`. Empty input scores 0.
pub fn grounding_accuracy(preds: &[(Option<BoundingBox>, BoundingBox)], threshold: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .filter(|(pred, gold)| pred.is_some_and(|p| iou(&p, gold) > threshold))
        .count();
    hits as f64 / preds.len() as f64
}

/// A `(subject, relation, object)` triplet; subject and object are box ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triplet {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

/// Predicted ranking and gold triplets for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RankedImage {
    pub ranked: Vec<Triplet>,
    pub gold: BTreeSet<Triplet>,
}

impl RankedImage {
    fn top_n(&self, n: usize) -> HashSet<&Triplet> {
        self.ranked.iter().take(n).collect()
    }
}

/// Micro recall of gold triplets within each image's top `n`. Returns 0
/// when there are no gold triplets at all.
pub fn recall_at_n(images: &[RankedImage], n: usize) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for img in images {
        let top = img.top_n(n);
        hit += img.gold.iter().filter(|t| top.contains(t)).count();
        total += img.gold.len();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Unweighted mean over relation labels of the per-label recall@n.
pub fn mean_recall_at_n(images: &[RankedImage], n: usize) -> f64 {
    let mut per_label: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for img in images {
        let top = img.top_n(n);
        for t in &img.gold {
            let entry = per_label.entry(t.relation.as_str()).or_default();
            entry.1 += 1;
            if top.contains(t) {
                entry.0 += 1;
            }
        }
    }
    if per_label.is_empty() {
        return 0.0;
    }
    let sum: f64 = per_label
        .values()
        .map(|&(hit, total)| hit as f64 / total as f64)
        .sum();
    sum / per_label.len() as f64
}

/// SplitMix64, the pinned generator behind split sampling.
///
/// `next_u64`: `state += 0x9E3779B97F4A7C15; z = state;`
/// `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB;`
/// `return z ^ (z >> 31)` (all arithmetic wrapping mod 2^64).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for split `index` of a run seeded with `seed`:
    /// state = `seed ^ ((index + 1) * 0xD1B54A32D192ED03)`.
    pub fn for_split(seed: u64, index: usize) -> Self {
        Self::new(seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform-ish integer in `0..bound` via the high half of a 128-bit product.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((u128::from(self.next_u64()) * bound as u128) >> 64) as usize
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Moves `count` uniformly chosen elements to the front of `items`
    /// (partial Fisher-Yates: for `j` in `0..count`, swap `j` with
    /// `j + below(len - j)`).
    pub fn partial_shuffle<T>(&mut self, items: &mut [T], count: usize) {
        for j in 0..count.min(items.len()) {
            let r = j + self.below(items.len() - j);
            items.swap(j, r);
        }
    }
}

/// Few-shot sampling mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotMode {
    /// `k_shots` training instances in total (grounding).
    #[default]
    Total,
    /// `k_shots` training instances for every class (relations).
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub k_shots: usize,
    pub n_splits: usize,
    pub seed: u64,
    pub val_size: usize,
    #[serde(default)]
    pub mode: ShotMode,
}

impl SplitSpec {
    pub fn new(k_shots: usize, seed: u64) -> Self {
        Self {
            k_shots,
            n_splits: DEFAULT_SPLITS,
            seed,
            val_size: DEFAULT_VAL_SIZE,
            mode: ShotMode::Total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    /// `index<TAB>train ids comma-joined<TAB>val ids comma-joined`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.index,
            self.train.join(","),
            self.val.join(",")
        )
    }
}

pub fn splits_to_tsv(splits: &[Split]) -> String {
    splits.iter().map(|s| s.to_line() + "\n").collect()
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(EvalError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Samples `n_splits` disjoint (train, val) pairs from `pool`, in pool order.
///
/// For split `i` a [`SplitMix64::for_split`] generator partially shuffles a
/// copy of the pool; the first `k_shots` positions become training ids and
/// the next `val_size` validation ids.
pub fn sample_splits(pool: &[String], spec: &SplitSpec) -> Result<Vec<Split>, EvalError> {
    if spec.n_splits == 0 {
        return Err(EvalError::NoSplits);
    }
    check_unique(pool.iter().map(String::as_str))?;
    let need = spec.k_shots + spec.val_size;
    if need > pool.len() {
        return Err(EvalError::PoolTooSmall {
            requested: need,
            available: pool.len(),
            class: None,
        });
    }
    Ok((0..spec.n_splits)
        .map(|index| {
            let mut rng = SplitMix64::for_split(spec.seed, index);
            let mut ids: Vec<&String> = pool.iter().collect();
            rng.partial_shuffle(&mut ids, need);
            Split {
                index,
                train: ids[..spec.k_shots].iter().map(|s| s.to_string()).collect(),
                val: ids[spec.k_shots..need]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            }
        })
        .collect())
}

/// Per-class sampling over `(id, class)` pairs: classes are visited in
/// lexicographic order, each contributing `k_shots` not-yet-chosen ids; the
/// validation ids are then drawn from the unchosen ids. One generator per
/// split drives all draws in that order.
pub fn sample_splits_per_class(
    pool: &[(String, String)],
    spec: &SplitSpec,
) -> Result<Vec<Split>, EvalError> {
    if spec.n_splits == 0 {
        return Err(EvalError::NoSplits);
    }
    let mut classes: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut ids_in_order: Vec<&str> = Vec::new();
    for (id, class) in pool {
        let members = classes.entry(class.as_str()).or_default();
        if members.contains(&id.as_str()) {
            return Err(EvalError::DuplicateId(id.clone()));
        }
        members.push(id);
        if !ids_in_order.contains(&id.as_str()) {
            ids_in_order.push(id);
        }
    }
    (0..spec.n_splits)
        .map(|index| {
            let mut rng = SplitMix64::for_split(spec.seed, index);
            let mut chosen: Vec<String> = Vec::new();
            for (class, members) in &classes {
                let mut free: Vec<&str> = members
                    .iter()
                    .copied()
                    .filter(|id| !chosen.iter().any(|c| c == id))
                    .collect();
                if free.len() < spec.k_shots {
                    return Err(EvalError::PoolTooSmall {
                        requested: spec.k_shots,
                        available: free.len(),
                        class: Some(class.to_string()),
                    });
                }
                rng.partial_shuffle(&mut free, spec.k_shots);
                chosen.extend(free[..spec.k_shots].iter().map(|s| s.to_string()));
            }
            let mut rest: Vec<&str> = ids_in_order
                .iter()
                .copied()
                .filter(|id| !chosen.iter().any(|c| c == id))
                .collect();
            if rest.len() < spec.val_size {
                return Err(EvalError::PoolTooSmall {
                    requested: spec.val_size,
                    available: rest.len(),
                    class: None,
                });
            }
            rng.partial_shuffle(&mut rest, spec.val_size);
            Ok(Split {
                index,
                train: chosen,
                val: rest[..spec.val_size]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            })
        })
        .collect()
}

pub type MetricMap = BTreeMap<String, f64>;

/// Per-split metrics with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_split: Vec<MetricMap>,
    pub mean: MetricMap,
    pub std: MetricMap,
}

/// Mean and sample (n-1) standard deviation per metric; std is 0 for one split.
pub fn aggregate(per_split: &[MetricMap]) -> Result<MetricReport, EvalError> {
    let first = per_split.first().ok_or(EvalError::NoSplits)?;
    let keys: Vec<String> = first.keys().cloned().collect();
    for (index, m) in per_split.iter().enumerate() {
        let found: Vec<String> = m.keys().cloned().collect();
        if found != keys {
            return Err(EvalError::MetricKeys {
                index,
                expected: keys,
                found,
            });
        }
    }
    let n = per_split.len() as f64;
    let mut mean = MetricMap::new();
    let mut std = MetricMap::new();
    for key in &keys {
        let values: Vec<f64> = per_split.iter().map(|m| m[key]).collect();
        let mu = values.iter().sum::<f64>() / n;
        let sd = if per_split.len() > 1 {
            (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        mean.insert(key.clone(), mu);
        std.insert(key.clone(), sd);
    }
    Ok(MetricReport {
        per_split: per_split.to_vec(),
        mean,
        std,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    /// Plain-text table with four decimals.
    pub fn to_human(&self) -> String {
        let mut out = String::new();
        for (i, split) in self.per_split.iter().enumerate() {
            let cells: Vec<String> = split.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            let _ = writeln!(out, "split {i}: {}", cells.join(" "));
        }
        for (key, mu) in &self.mean {
            let _ = writeln!(out, "{key}: {mu:.4} ± {:.4}", self.std[key]);
        }
        out
    }
}

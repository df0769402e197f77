//! Partitioning region proposals into color-set-sized batches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::iou;
use crate::raster::BoundingBox;

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BatchError {
    #[error("no region proposals to batch")]
    NoProposals,
    #[error("batch capacity must be at least 1")]
    ZeroCapacity,
    #[error("overlap threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

/// Proposals marked together in one colorized image. Member `i` is drawn
/// with color `i` of the color set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBatch {
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<RegionBatch>,
    pub overlap_threshold: f64,
    pub capacity: usize,
}

impl BatchPlan {
    pub fn proposal_count(&self) -> usize {
        self.batches.iter().map(|b| b.members.len()).sum()
    }

    /// `(batch index, slot within batch)` of a proposal.
    pub fn locate(&self, proposal: usize) -> Option<(usize, usize)> {
        self.batches.iter().enumerate().find_map(|(bi, b)| {
            b.members
                .iter()
                .position(|&m| m == proposal)
                .map(|slot| (bi, slot))
        })
    }
}

/// Greedy first-fit by descending box area (ties by index): each proposal
/// joins the earliest batch with room whose members all overlap it with
/// IoU below `overlap_threshold`, otherwise it opens a new batch.
pub fn plan_batches(
    proposals: &[BoundingBox],
    capacity: usize,
    overlap_threshold: f64,
) -> Result<BatchPlan, BatchError> {
    if proposals.is_empty() {
        return Err(BatchError::NoProposals);
    }
    if capacity == 0 {
        return Err(BatchError::ZeroCapacity);
    }
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(BatchError::BadThreshold(overlap_threshold));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .area()
            .total_cmp(&proposals[a].area())
            .then(a.cmp(&b))
    });

    let mut batches: Vec<RegionBatch> = Vec::new();
    for idx in order {
        let fits = |batch: &RegionBatch| {
            batch.members.len() < capacity
                && batch
                    .members
                    .iter()
                    .all(|&m| iou(&proposals[m], &proposals[idx]) < overlap_threshold)
        };
        match batches.iter_mut().find(|b| fits(b)) {
            Some(batch) => batch.members.push(idx),
            None => batches.push(RegionBatch { members: vec![idx] }),
        }
    }
    Ok(BatchPlan {
        batches,
        overlap_threshold,
        capacity,
    })
}

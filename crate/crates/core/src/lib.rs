//! Colorful cross-modal prompt tuning: colorize region proposals, ask a
//! masked-token scorer which color fills the blank, and evaluate the
//! answers.

pub mod backend;
pub mod batching;
pub mod colorspec;
pub mod cps;
pub mod dataio;
pub mod evalkit;
pub mod pipeline;
pub mod prompt;
pub mod raster;
pub mod scoring;

pub use backend::{
    BackendError, CallCounter, ChromaticOracle, HashStub, RemoteBackend, RemoteConfig,
    ScoreRequest, ScoreResponse, ScoringBackend,
};
pub use batching::{plan_batches, BatchPlan, RegionBatch};
pub use colorspec::{
    preset_cps_colors, preset_frequency_colors, CandidateSets, Color, ColorSet, ColorText,
    NamedColorTable, Rgb,
};
pub use cps::{probe_scores, search, ScoreMatrix};
pub use dataio::{GroundingInstance, PredictionRecord, RelationInstance};
pub use evalkit::{MetricReport, SplitSpec, Triplet};
pub use prompt::{CandidateTokenSeq, PromptText};
pub use raster::{BoundingBox, RasterImage, SegmentMask, Transparency};
pub use scoring::{decode_grounding, GroundingResult, MaskDistribution};

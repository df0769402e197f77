//! End-to-end flows: colorize, query the backend, decode, evaluate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{BackendError, ScoreRequest, ScoringBackend, META_ALPHA, META_INSTANCE};
use crate::batching::{plan_batches, BatchError, BatchPlan, DEFAULT_OVERLAP_THRESHOLD};
use crate::colorspec::{preset_cps_colors, Color, ColorError, ColorSet};
use crate::dataio::{
    DataError, GroundingInstance, PredictionRecord, RelationInstance, RelationPrediction,
};
use crate::evalkit::{
    grounding_accuracy, mean_recall_at_n, recall_at_n, MetricMap, RankedImage, Triplet,
    DEFAULT_IOU_THRESHOLD,
};
use crate::prompt::{grounding_template, relation_template, CandidateTokenSeq, PromptError};
use crate::raster::{
    apply_visual_subprompt, RasterError, RasterImage, Region, Shape, Transparency,
};
use crate::scoring::{
    decode_grounding, relation_slot_candidates, score_relations, GroundingResult, MaskDistribution,
    RelationEntry, RelationScoreTable, ScoringError, NONE_LABEL,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Config(String),
}

impl PipelineError {
    pub fn is_backend(&self) -> bool {
        matches!(self, PipelineError::Backend(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingConfig {
    pub colors: ColorSet,
    pub alpha: Transparency,
    pub capacity: usize,
    pub overlap_threshold: f64,
    pub shape: Shape,
}

impl GroundingConfig {
    /// One red region per image at half transparency.
    pub fn reference() -> Self {
        Self {
            colors: ColorSet::new(vec![Color::named((240, 0, 30), "red")])
                .expect("single color is a valid set"),
            alpha: Transparency::new(0.5).expect("0.5 is a valid transparency"),
            capacity: 1,
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            shape: Shape::Block,
        }
    }

    /// The six searched colors, six regions per image.
    pub fn toolkit() -> Self {
        Self {
            colors: preset_cps_colors(),
            capacity: 6,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.capacity > self.colors.len() {
            return Err(PipelineError::Config(format!(
                "batch capacity {} exceeds the {} available colors",
                self.capacity,
                self.colors.len()
            )));
        }
        Ok(())
    }
}

/// One colorized image of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorizedBatch {
    pub image: RasterImage,
    /// `(proposal index, color)` in drawing order.
    pub assignments: Vec<(usize, Color)>,
}

/// Plans batches and draws every batch's overlay.
pub fn colorize(
    image: &RasterImage,
    regions: &[Region],
    config: &GroundingConfig,
) -> Result<(BatchPlan, Vec<ColorizedBatch>), PipelineError> {
    config.validate()?;
    let boxes: Vec<_> = regions.iter().map(|r| r.bbox).collect();
    let plan = plan_batches(&boxes, config.capacity, config.overlap_threshold)?;
    let batches = plan
        .batches
        .iter()
        .map(|batch| {
            let assignments: Vec<(usize, Color)> = batch
                .members
                .iter()
                .zip(config.colors.iter())
                .map(|(&m, c)| (m, c.clone()))
                .collect();
            let pairs: Vec<(&Region, &Color)> =
                assignments.iter().map(|(m, c)| (&regions[*m], c)).collect();
            let image = apply_visual_subprompt(image, &pairs, config.alpha, config.shape)?;
            Ok(ColorizedBatch { image, assignments })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok((plan, batches))
}

/// Grounding decision plus the number of backend calls it took.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutcome {
    pub result: GroundingResult,
    pub plan: BatchPlan,
    pub backend_calls: usize,
}

/// Runs one query over one image: one backend call per batch.
///
/// `meta` is forwarded with every request, with `alpha` set to the run's
/// transparency.
pub fn ground(
    backend: &dyn ScoringBackend,
    image: &RasterImage,
    regions: &[Region],
    query: &str,
    meta: &BTreeMap<String, String>,
    config: &GroundingConfig,
) -> Result<GroundingOutcome, PipelineError> {
    let prompt = grounding_template(query)?;
    let (plan, batches) = colorize(image, regions, config)?;
    let mut meta = meta.clone();
    meta.insert(META_ALPHA.to_string(), config.alpha.get().to_string());
    let mut dists = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut slot: Vec<CandidateTokenSeq> = batch
            .assignments
            .iter()
            .map(|(_, c)| CandidateTokenSeq::single(c.text.as_str()))
            .collect();
        slot.push(CandidateTokenSeq::single(NONE_LABEL));
        let request = ScoreRequest::new(batch.image, &prompt, vec![slot], meta.clone())?;
        let response = backend.score(&request)?;
        response.validate_for(&request)?;
        dists.push(response.distribution()?);
    }
    let backend_calls = dists.len();
    let result = decode_grounding(&plan, &config.colors, &dists)?;
    Ok(GroundingOutcome {
        result,
        plan,
        backend_calls,
    })
}

/// The instance's proposals with their masks loaded.
pub fn load_regions(inst: &GroundingInstance, base: &Path) -> Result<Vec<Region>, PipelineError> {
    inst.proposals
        .iter()
        .map(|p| {
            Ok(Region {
                bbox: p.bbox,
                mask: p.load_mask(base)?,
            })
        })
        .collect()
}

/// Loads `rel` resolved against the dataset directory `base`.
pub fn load_image(base: &Path, rel: &Path) -> Result<RasterImage, PipelineError> {
    let path = base.join(rel);
    RasterImage::load_png(&path).map_err(|source| {
        DataError::Image {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

/// Grounds one dataset instance, adding its id to the request meta.
pub fn ground_instance(
    backend: &dyn ScoringBackend,
    inst: &GroundingInstance,
    base: &Path,
    config: &GroundingConfig,
) -> Result<PredictionRecord, PipelineError> {
    let started = Instant::now();
    let image = load_image(base, &inst.image)?;
    let regions = load_regions(inst, base)?;
    let mut meta = inst.meta.clone();
    meta.insert(META_INSTANCE.to_string(), inst.id.clone());
    let outcome = ground(backend, &image, &regions, &inst.query, &meta, config)?;
    let r = &outcome.result;
    Ok(PredictionRecord {
        id: inst.id.clone(),
        predicted_box: r.predicted.map(|i| regions[i].bbox),
        fallback_box: Some(regions[r.fallback].bbox),
        per_region_prob: (0..regions.len())
            .map(|i| r.per_region_prob.get(&i).copied().unwrap_or(0.0))
            .collect(),
        backend_calls: outcome.backend_calls,
        elapsed_ms: started.elapsed().as_millis() as u64,
        error: None,
    })
}

/// Records of a dataset run, sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRun<T> {
    pub records: Vec<T>,
    /// Instances that failed because the backend failed.
    pub backend_failures: usize,
    /// Instances that failed for any other reason.
    pub other_failures: usize,
}

impl<T> DatasetRun<T> {
    fn collect(items: Vec<(T, Option<PipelineError>)>, id: impl Fn(&T) -> &str) -> Self {
        let backend_failures = items
            .iter()
            .filter(|(_, e)| e.as_ref().is_some_and(|e| e.is_backend()))
            .count();
        let other_failures = items
            .iter()
            .filter(|(_, e)| e.as_ref().is_some_and(|e| !e.is_backend()))
            .count();
        let mut records: Vec<T> = items.into_iter().map(|(r, _)| r).collect();
        records.sort_by(|a, b| id(a).cmp(id(b)));
        Self {
            records,
            backend_failures,
            other_failures,
        }
    }

    pub fn all_failed(&self) -> bool {
        !self.records.is_empty()
            && self.backend_failures + self.other_failures == self.records.len()
    }
}

/// Grounds every instance on the current rayon pool. Failures are kept as
/// error records and the run continues.
pub fn ground_dataset(
    backend: &dyn ScoringBackend,
    instances: &[GroundingInstance],
    base: &Path,
    config: &GroundingConfig,
) -> Result<DatasetRun<PredictionRecord>, PipelineError> {
    config.validate()?;
    let items = instances
        .par_iter()
        .map(|inst| match ground_instance(backend, inst, base, config) {
            Ok(r) => (r, None),
            Err(e) => (PredictionRecord::failed(&inst.id, e.to_string()), Some(e)),
        })
        .collect();
    Ok(DatasetRun::collect(items, |r| r.id.as_str()))
}

/// Accuracy of `predictions` against the instances they name; instances
/// without a usable prediction count as misses.
pub fn grounding_metrics(
    instances: &[GroundingInstance],
    predictions: &[PredictionRecord],
) -> MetricMap {
    let by_id: BTreeMap<&str, &PredictionRecord> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let pairs: Vec<_> = instances
        .iter()
        .map(|inst| {
            let answer = by_id.get(inst.id.as_str()).and_then(|p| p.answer());
            (answer, inst.gold_box)
        })
        .collect();
    let mut m = MetricMap::new();
    m.insert(
        "accuracy".into(),
        grounding_accuracy(&pairs, DEFAULT_IOU_THRESHOLD),
    );
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationConfig {
    /// The first two colors mark the subject and the object.
    pub colors: ColorSet,
    pub alpha: Transparency,
    pub shape: Shape,
    pub vocab: Vec<RelationEntry>,
}

/// Scores every relation in the vocabulary for one subject/object pair.
pub fn score_pair(
    backend: &dyn ScoringBackend,
    image: &RasterImage,
    inst: &RelationInstance,
    config: &RelationConfig,
) -> Result<RelationScoreTable, PipelineError> {
    let (Some(cs), Some(co)) = (config.colors.get(0), config.colors.get(1)) else {
        return Err(PipelineError::Config(
            "relation prompts need at least two colors".into(),
        ));
    };
    if config.vocab.is_empty() {
        return Err(PipelineError::Config("relation vocabulary is empty".into()));
    }
    let subject = Region::from_box(inst.subject.bbox);
    let object = Region::from_box(inst.object.bbox);
    let colored = apply_visual_subprompt(
        image,
        &[(&subject, cs), (&object, co)],
        config.alpha,
        config.shape,
    )?;
    let lengths: BTreeSet<usize> = config.vocab.iter().map(|e| e.tokens.len()).collect();
    let meta: BTreeMap<String, String> = [
        (META_INSTANCE.to_string(), inst.id.clone()),
        (META_ALPHA.to_string(), config.alpha.get().to_string()),
    ]
    .into_iter()
    .collect();
    let mut dists: BTreeMap<usize, MaskDistribution> = BTreeMap::new();
    for l in lengths {
        let prompt =
            relation_template(&inst.subject.text, &cs.text, &inst.object.text, &co.text, l)?;
        let candidates = relation_slot_candidates(&config.vocab, l)?;
        let request = ScoreRequest::new(colored.clone(), &prompt, candidates, meta.clone())?;
        let response = backend.score(&request)?;
        response.validate_for(&request)?;
        dists.insert(l, response.distribution()?);
    }
    Ok(score_relations(&dists, &config.vocab)?)
}

pub fn relations_dataset(
    backend: &dyn ScoringBackend,
    instances: &[RelationInstance],
    base: &Path,
    config: &RelationConfig,
) -> DatasetRun<RelationPrediction> {
    let items = instances
        .par_iter()
        .map(|inst| {
            let started = Instant::now();
            let scored = load_image(base, &inst.image)
                .and_then(|img| score_pair(backend, &img, inst, config));
            let elapsed_ms = started.elapsed().as_millis() as u64;
            match scored {
                Ok(t) => (
                    RelationPrediction {
                        id: inst.id.clone(),
                        scores: t.scores,
                        ranked: t.ranked,
                        na_scores: t.na_scores,
                        elapsed_ms,
                        error: None,
                    },
                    None,
                ),
                Err(e) => (
                    RelationPrediction {
                        id: inst.id.clone(),
                        scores: BTreeMap::new(),
                        ranked: Vec::new(),
                        na_scores: BTreeMap::new(),
                        elapsed_ms,
                        error: Some(e.to_string()),
                    },
                    Some(e),
                ),
            }
        })
        .collect();
    DatasetRun::collect(items, |r| r.id.as_str())
}

/// Groups pairs by image and ranks every (pair, relation) triplet by score,
/// ties by triplet order.
pub fn rank_images(
    instances: &[RelationInstance],
    predictions: &[RelationPrediction],
) -> Vec<RankedImage> {
    let by_id: BTreeMap<&str, &RelationPrediction> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    // Scored and gold triplets per image.
    type Triplets = (Vec<(f64, Triplet)>, BTreeSet<Triplet>);
    let mut images: BTreeMap<&Path, Triplets> = BTreeMap::new();
    for inst in instances {
        let (s, o) = (inst.subject.key(), inst.object.key());
        let entry = images.entry(inst.image.as_path()).or_default();
        for g in &inst.gold_relations {
            entry.1.insert(Triplet::new(&s, g, &o));
        }
        if let Some(pred) = by_id.get(inst.id.as_str()) {
            for (rel, score) in &pred.scores {
                entry.0.push((*score, Triplet::new(&s, rel, &o)));
            }
        }
    }
    images
        .into_values()
        .map(|(mut scored, gold)| {
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            RankedImage {
                ranked: scored.into_iter().map(|(_, t)| t).collect(),
                gold,
            }
        })
        .collect()
}

/// `R@n` and `mR@n` for each `n`.
pub fn relation_metrics(images: &[RankedImage], ns: &[usize]) -> MetricMap {
    let mut m = MetricMap::new();
    for &n in ns {
        m.insert(format!("R@{n}"), recall_at_n(images, n));
        m.insert(format!("mR@{n}"), mean_recall_at_n(images, n));
    }
    m
}

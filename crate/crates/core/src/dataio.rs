//! Dataset schemas, JSONL persistence and the synthetic grounding scenes.
//!
//! A dataset directory holds `data.jsonl`, an `images/` folder and, after a
//! run, `report.json`. Boxes are `[x, y, w, h]` arrays.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::{META_ALPHA, META_TARGET_BOX, ORACLE_BACKGROUND};
use crate::colorspec::ColorSet;
use crate::evalkit::{MetricReport, SplitMix64};
use crate::raster::{BoundingBox, RasterError, RasterImage, SegmentMask};

pub const DATA_FILE: &str = "data.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const REPORT_FILE: &str = "report.json";
pub const DEFAULT_SPLIT: &str = "test";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed JSON record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Validation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: RasterError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// A region proposal with an optional mask: either an inline run-length
/// string `w,h:runs` or a PNG path relative to the dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub mask: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ProposalRepr {
    Bare(BoundingBox),
    Full {
        #[serde(rename = "box")]
        bbox: BoundingBox,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<String>,
    },
}

impl Serialize for Proposal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match &self.mask {
            None => ProposalRepr::Bare(self.bbox),
            Some(m) => ProposalRepr::Full {
                bbox: self.bbox,
                mask: Some(m.clone()),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Proposal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match ProposalRepr::deserialize(d)? {
            ProposalRepr::Bare(bbox) => Proposal { bbox, mask: None },
            ProposalRepr::Full { bbox, mask } => Proposal { bbox, mask },
        })
    }
}

fn is_inline_rle(mask: &str) -> bool {
    mask.split_once(':').is_some_and(|(dims, _)| {
        dims.split(',').count() == 2 && dims.split(',').all(|d| d.trim().parse::<u32>().is_ok())
    })
}

impl Proposal {
    pub fn from_box(bbox: BoundingBox) -> Self {
        Self { bbox, mask: None }
    }

    pub fn load_mask(&self, base: &Path) -> Result<Option<SegmentMask>, DataError> {
        let Some(mask) = &self.mask else {
            return Ok(None);
        };
        let as_path = base.join(mask);
        let loaded = if is_inline_rle(mask) {
            SegmentMask::from_rle(mask)
        } else {
            SegmentMask::load_png(&as_path)
        };
        loaded.map(Some).map_err(|source| DataError::Image {
            path: if is_inline_rle(mask) {
                "inline mask".into()
            } else {
                as_path.display().to_string()
            },
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingInstance {
    pub id: String,
    /// Image path relative to the dataset directory.
    pub image: PathBuf,
    pub query: String,
    pub proposals: Vec<Proposal>,
    pub gold_box: BoundingBox,
    pub split: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Entity {
    /// Identity used in triplets: the explicit id, else the box coordinates.
    pub fn key(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.bbox.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub id: String,
    pub image: PathBuf,
    pub subject: Entity,
    pub object: Entity,
    pub gold_relations: Vec<String>,
    pub split: String,
}

struct Record<'a> {
    line: usize,
    obj: &'a Map<String, Value>,
}

impl Record<'_> {
    fn invalid(&self, field: &str, message: impl Into<String>) -> DataError {
        DataError::Validation {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn parse<T: DeserializeOwned>(&self, field: &str, value: &Value) -> Result<T, DataError> {
        serde_json::from_value(value.clone()).map_err(|e| self.invalid(field, e.to_string()))
    }

    fn required<T: DeserializeOwned>(&self, field: &str) -> Result<T, DataError> {
        let value = self
            .obj
            .get(field)
            .ok_or_else(|| self.invalid(field, "missing"))?;
        self.parse(field, value)
    }

    fn optional<T: DeserializeOwned + Default>(&self, field: &str) -> Result<T, DataError> {
        match self.obj.get(field) {
            None | Some(Value::Null) => Ok(T::default()),
            Some(v) => self.parse(field, v),
        }
    }

    fn nonempty(&self, field: &str) -> Result<String, DataError> {
        let s: String = self.required(field)?;
        if s.trim().is_empty() {
            return Err(self.invalid(field, "must not be empty"));
        }
        Ok(s)
    }

    fn entity(&self, field: &str) -> Result<Entity, DataError> {
        let value = self
            .obj
            .get(field)
            .ok_or_else(|| self.invalid(field, "missing"))?;
        let obj = value
            .as_object()
            .ok_or_else(|| self.invalid(field, "expected an object"))?;
        let inner = Record {
            line: self.line,
            obj,
        };
        let prefix = |f: &str| format!("{field}.{f}");
        let rename = |e: DataError| match e {
            DataError::Validation {
                line,
                field: f,
                message,
            } => DataError::Validation {
                line,
                field: prefix(&f),
                message,
            },
            other => other,
        };
        Ok(Entity {
            text: inner.nonempty("text").map_err(rename)?,
            bbox: inner.required("box").map_err(rename)?,
            id: inner.optional::<Option<String>>("id").map_err(rename)?,
        })
    }
}

/// Reads a JSONL file, handing each non-blank line's object to `build`.
fn load_jsonl<T>(
    path: &Path,
    mut build: impl FnMut(&Record) -> Result<(String, T), DataError>,
) -> Result<Vec<T>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DataError::Parse {
            line,
            message: "expected a JSON object".into(),
        })?;
        let record = Record { line, obj };
        let (id, item) = build(&record)?;
        if !seen.insert(id.clone()) {
            return Err(record.invalid("id", format!("duplicate id {id:?}")));
        }
        out.push(item);
    }
    Ok(out)
}

pub fn load_grounding(path: &Path) -> Result<Vec<GroundingInstance>, DataError> {
    load_jsonl(path, |r| {
        let inst = GroundingInstance {
            id: r.nonempty("id")?,
            image: r.required("image")?,
            query: r.nonempty("query")?,
            proposals: r.required("proposals")?,
            gold_box: r.required("gold_box")?,
            split: r
                .optional::<Option<String>>("split")?
                .unwrap_or_else(|| DEFAULT_SPLIT.to_string()),
            meta: r.optional("meta")?,
        };
        if inst.proposals.is_empty() {
            return Err(r.invalid("proposals", "at least one proposal is required"));
        }
        Ok((inst.id.clone(), inst))
    })
}

pub fn load_relations(path: &Path) -> Result<Vec<RelationInstance>, DataError> {
    load_jsonl(path, |r| {
        let inst = RelationInstance {
            id: r.nonempty("id")?,
            image: r.required("image")?,
            subject: r.entity("subject")?,
            object: r.entity("object")?,
            gold_relations: r.optional("gold_relations")?,
            split: r
                .optional::<Option<String>>("split")?
                .unwrap_or_else(|| DEFAULT_SPLIT.to_string()),
        };
        if let Some(i) = inst.gold_relations.iter().position(|g| g.trim().is_empty()) {
            return Err(r.invalid(&format!("gold_relations[{i}]"), "must not be empty"));
        }
        Ok((inst.id.clone(), inst))
    })
}

/// One JSON object per line, written atomically.
pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let mut body = Vec::new();
    for item in items {
        serde_json::to_writer(&mut body, item).expect("record serializes");
        body.push(b'\n');
    }
    write_atomic(path, &body).map_err(io_err(path))
}

pub fn load_jsonl_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Grounding output for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Region whose color beat `none` most confidently, if any.
    pub predicted_box: Option<BoundingBox>,
    /// Best region ignoring `none`; scored when `predicted_box` is absent.
    pub fallback_box: Option<BoundingBox>,
    /// Probability of each proposal, in proposal order.
    pub per_region_prob: Vec<f64>,
    pub backend_calls: usize,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn failed(id: &str, error: String) -> Self {
        Self {
            id: id.to_string(),
            predicted_box: None,
            fallback_box: None,
            per_region_prob: Vec::new(),
            backend_calls: 0,
            elapsed_ms: 0,
            error: Some(error),
        }
    }

    /// The box scored for accuracy.
    pub fn answer(&self) -> Option<BoundingBox> {
        self.predicted_box.or(self.fallback_box)
    }
}

/// Relation output for one subject/object pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub id: String,
    pub scores: BTreeMap<String, f64>,
    pub ranked: Vec<String>,
    pub na_scores: BTreeMap<usize, f64>,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run settings echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub color_set: ColorSet,
    pub alpha: f64,
    pub batch_capacity: usize,
    pub overlap_threshold: f64,
    pub backend_id: String,
    pub seed: u64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunEcho,
    pub metrics: MetricReport,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut body = serde_json::to_vec_pretty(self).expect("report serializes");
        body.push(b'\n');
        write_atomic(path, &body).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Side of the square cell each synthetic proposal is drawn in.
pub const SYNTH_CELL: u32 = 32;
const SYNTH_MIN_SIDE: u32 = 8;
const SYNTH_MAX_SIDE: u32 = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub max_proposals: usize,
    pub seed: u64,
    /// Recorded in each scene's meta for the oracle.
    pub alpha: f64,
}

impl SynthConfig {
    pub fn new(n_scenes: usize, max_proposals: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            max_proposals,
            seed,
            alpha: 0.5,
        }
    }
}

/// A generated dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub instances: Vec<GroundingInstance>,
    pub images: Vec<RasterImage>,
}

/// Gray scenes with up to `max_proposals` boxes and one hidden target.
///
/// The image is a square grid of 32-pixel cells; each proposal sits inside
/// its own randomly chosen cell, so proposals never overlap.
pub fn generate_synthetic_grounding(config: &SynthConfig) -> SyntheticDataset {
    let max = config.max_proposals.max(1);
    let cols = (max as f64).sqrt().ceil() as u32;
    let side = cols * SYNTH_CELL;
    let mut rng = SplitMix64::new(config.seed);
    let mut instances = Vec::with_capacity(config.n_scenes);
    let mut images = Vec::with_capacity(config.n_scenes);
    let span =
        |rng: &mut SplitMix64, lo: u32, hi: u32| lo + rng.below((hi - lo + 1) as usize) as u32;
    for scene in 0..config.n_scenes {
        let k = 1 + rng.below(max);
        let mut cells: Vec<u32> = (0..cols * cols).collect();
        rng.partial_shuffle(&mut cells, k);
        let proposals: Vec<Proposal> = cells[..k]
            .iter()
            .map(|&cell| {
                let w = span(&mut rng, SYNTH_MIN_SIDE, SYNTH_MAX_SIDE);
                let h = span(&mut rng, SYNTH_MIN_SIDE, SYNTH_MAX_SIDE);
                let x = (cell % cols) * SYNTH_CELL + span(&mut rng, 0, SYNTH_CELL - w);
                let y = (cell / cols) * SYNTH_CELL + span(&mut rng, 0, SYNTH_CELL - h);
                Proposal::from_box(
                    BoundingBox::new(f64::from(x), f64::from(y), f64::from(w), f64::from(h))
                        .expect("positive box"),
                )
            })
            .collect();
        let target = rng.below(k);
        let id = format!("scene{scene:05}");
        let gold_box = proposals[target].bbox;
        instances.push(GroundingInstance {
            image: PathBuf::from(IMAGES_DIR).join(format!("{id}.png")),
            id,
            query: format!("target {target}"),
            proposals,
            gold_box,
            split: DEFAULT_SPLIT.to_string(),
            meta: [
                (META_TARGET_BOX.to_string(), gold_box.to_string()),
                (META_ALPHA.to_string(), config.alpha.to_string()),
            ]
            .into_iter()
            .collect(),
        });
        images.push(RasterImage::filled(side, side, ORACLE_BACKGROUND).expect("non-empty image"));
    }
    SyntheticDataset { instances, images }
}

impl SyntheticDataset {
    /// Writes `images/` then `data.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        for (inst, img) in self.instances.iter().zip(&self.images) {
            let path = dir.join(&inst.image);
            let png = img.to_png_bytes().map_err(|source| DataError::Image {
                path: path.display().to_string(),
                source,
            })?;
            write_atomic(&path, &png).map_err(io_err(&path))?;
        }
        save_jsonl(&dir.join(DATA_FILE), &self.instances)
    }
}

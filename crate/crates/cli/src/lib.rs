//! The `cpt` command line: synthetic data, overlays, color search, grounding,
//! relation scoring and few-shot evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::num::NonZeroU32;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use cpt_core::backend::{
    BackendError, ChromaticOracle, HashStub, RemoteBackend, RemoteConfig, ScoringBackend,
    BACKEND_URL_ENV,
};
use cpt_core::batching::DEFAULT_OVERLAP_THRESHOLD;
use cpt_core::colorspec::{
    preset_cps_colors, preset_frequency_colors, CandidateSets, ColorError, ColorSet,
    NamedColorTable, DEFAULT_GRID_RADIUS, DEFAULT_GRID_STEP,
};
use cpt_core::cps::{
    probe_scores, probe_surface, search, CpsError, PlantedSurface, ScoreMatrix, DEFAULT_BLOCK_SIZE,
    DEFAULT_DISCARD_THRESHOLD,
};
use cpt_core::dataio::{
    generate_synthetic_grounding, load_grounding, load_jsonl_records, load_relations, save_jsonl,
    write_atomic, DataError, PredictionRecord, RelationPrediction, RunEcho, RunReport, SynthConfig,
    DATA_FILE, IMAGES_DIR, REPORT_FILE,
};
use cpt_core::evalkit::{
    aggregate, sample_splits, sample_splits_per_class, splits_to_tsv, EvalError, MetricMap,
    MetricReport, ShotMode, Split, SplitSpec, DEFAULT_SPLITS, DEFAULT_VAL_SIZE,
};
use cpt_core::pipeline::{
    colorize, ground_dataset, grounding_metrics, load_image, load_regions, rank_images,
    relation_metrics, relations_dataset, DatasetRun, GroundingConfig, PipelineError,
    RelationConfig,
};
use cpt_core::prompt::{cps_probe_template, ProbeVariant};
use cpt_core::raster::{RasterError, Shape, Transparency};
use cpt_core::scoring::RelationEntry;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MATRIX_FILE: &str = "score_matrix.tsv";
pub const COLORS_FILE: &str = "colors.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";
/// Regions per image in toolkit mode, when enough colors are available.
pub const TOOLKIT_CAPACITY: usize = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("{0}")]
    Empty(String),
}

impl CliError {
    /// 2 for bad input, 3 for backend failures, 4 for empty results.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Empty(_) => 4,
        }
    }
}

fn invalid(message: impl std::fmt::Display) -> CliError {
    CliError::Validation(message.to_string())
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_backend() {
            CliError::Backend(e.to_string())
        } else {
            invalid(e)
        }
    }
}

impl From<CpsError> for CliError {
    fn from(e: CpsError) -> Self {
        match e {
            CpsError::Backend { .. } => CliError::Backend(e.to_string()),
            CpsError::AllDiscarded(_) => CliError::Empty(e.to_string()),
            other => invalid(other),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        invalid(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        invalid(e)
    }
}

impl From<ColorError> for CliError {
    fn from(e: ColorError) -> Self {
        invalid(e)
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        invalid(e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "cpt", version, about = "Colorful prompt tuning toolkit")]
pub struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for instance-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grounding dataset.
    Synth(SynthArgs),
    /// Write the colored overlay of every batch for inspection.
    Colorize(ColorizeArgs),
    /// Probe a backend with pure colors and select a color set.
    SearchColors(SearchArgs),
    /// Ground every query of a dataset.
    Ground(GroundArgs),
    /// Score relations for subject/object pairs.
    Relations(RelationsArgs),
    /// Few-shot splits and metrics over saved predictions.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One red region per image at alpha 0.5.
    #[default]
    Reference,
    /// Six searched colors, six regions per image.
    Toolkit,
}

/// Settings shared by the run commands. Every field is optional so a config
/// file and the command line can be layered.
#[derive(Clone, Debug, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// `cps`, `frequency`, `red` or a `name<TAB>r,g,b` table file.
    #[arg(long)]
    pub colors: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Regions colored per image.
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub overlap_threshold: Option<f64>,
    /// `oracle`, `stub`, `remote`, an http(s) URL, or `planted:FILE`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Probe prompt wording: `of` or `in`.
    #[arg(long)]
    pub probe: Option<ProbeVariant>,
    /// `block` or `mask`.
    #[arg(long)]
    pub shape: Option<Shape>,
}

impl RunSettings {
    /// Fields of `self`, falling back to `base`.
    fn over(self, base: RunSettings) -> RunSettings {
        RunSettings {
            mode: self.mode.or(base.mode),
            colors: self.colors.or(base.colors),
            alpha: self.alpha.or(base.alpha),
            capacity: self.capacity.or(base.capacity),
            overlap_threshold: self.overlap_threshold.or(base.overlap_threshold),
            backend: self.backend.or(base.backend),
            seed: self.seed.or(base.seed),
            shots: self.shots.or(base.shots),
            splits: self.splits.or(base.splits),
            val_size: self.val_size.or(base.val_size),
            probe: self.probe.or(base.probe),
            shape: self.shape.or(base.shape),
        }
    }

    /// Parses a config file. Relative color table paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<RunSettings> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut settings: RunSettings =
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if let Some(colors) = &settings.colors {
            if preset(colors).is_none() && Path::new(colors).is_relative() {
                let dir = path.parent().unwrap_or(Path::new(""));
                settings.colors = Some(dir.join(colors).display().to_string());
            }
        }
        Ok(settings)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Oracle,
    Stub,
    Remote(String),
    /// Closed-form planted score surface, only for color search.
    Planted(PathBuf),
}

impl BackendSpec {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "oracle" => Ok(Self::Oracle),
            "stub" => Ok(Self::Stub),
            "remote" => std::env::var(BACKEND_URL_ENV)
                .map(Self::Remote)
                .map_err(|_| invalid(format!("backend `remote` needs {BACKEND_URL_ENV}"))),
            url if url.starts_with("http://") || url.starts_with("https://") => {
                Ok(Self::Remote(url.to_string()))
            }
            other => match other.strip_prefix("planted:") {
                Some(path) if !path.is_empty() => Ok(Self::Planted(PathBuf::from(path))),
                _ => Err(invalid(format!(
                    "unknown backend {other:?}, expected oracle, stub, remote, a URL or planted:FILE"
                ))),
            },
        }
    }

    fn label(&self) -> String {
        match self {
            Self::Oracle => "oracle".into(),
            Self::Stub => "stub".into(),
            Self::Remote(url) => url.clone(),
            Self::Planted(path) => format!("planted:{}", path.display()),
        }
    }

    /// Builds a scoring backend. The oracle knows `colors` on top of its
    /// named table.
    pub fn build(&self, colors: &ColorSet) -> Result<Box<dyn ScoringBackend>> {
        self.build_with(ChromaticOracle::default().with_colors(colors))
    }

    fn build_with(&self, oracle: ChromaticOracle) -> Result<Box<dyn ScoringBackend>> {
        match self {
            Self::Oracle => Ok(Box::new(oracle)),
            Self::Stub => Ok(Box::new(HashStub)),
            Self::Remote(url) => {
                let config = RemoteConfig::from_env_or(Some(url))
                    .unwrap_or_else(|| RemoteConfig::new(url.as_str()));
                Ok(Box::new(RemoteBackend::new(config)?))
            }
            Self::Planted(_) => Err(invalid("a planted surface can only drive search-colors")),
        }
    }
}

fn preset(name: &str) -> Option<ColorSet> {
    match name {
        "cps" => Some(preset_cps_colors()),
        "frequency" => Some(preset_frequency_colors()),
        "red" => Some(GroundingConfig::reference().colors),
        _ => None,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_colors(source: &str) -> Result<ColorSet> {
    match preset(source) {
        Some(set) => Ok(set),
        None => ColorSet::from_table(&read_text(Path::new(source))?)
            .map_err(|e| invalid(format!("{source}: {e}"))),
    }
}

/// Effective settings after layering mode defaults, config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub color_source: String,
    pub colors: ColorSet,
    pub alpha: Transparency,
    pub capacity: usize,
    pub overlap_threshold: f64,
    pub backend: BackendSpec,
    pub seed: u64,
    pub shots: usize,
    pub splits: usize,
    pub val_size: usize,
    pub probe: ProbeVariant,
    pub shape: Shape,
}

impl RunConfig {
    pub fn resolve(settings: RunSettings) -> Result<Self> {
        let mode = settings.mode.unwrap_or_default();
        let color_source = settings.colors.unwrap_or_else(|| {
            match mode {
                Mode::Reference => "red",
                Mode::Toolkit => "cps",
            }
            .to_string()
        });
        let colors = load_colors(&color_source)?;
        let capacity = settings.capacity.unwrap_or(match mode {
            Mode::Reference => 1,
            Mode::Toolkit => TOOLKIT_CAPACITY.min(colors.len()),
        });
        if capacity == 0 {
            return Err(invalid("capacity must be at least 1"));
        }
        let alpha = settings.alpha.unwrap_or(0.5);
        let alpha = Transparency::new(alpha)?;
        let overlap_threshold = settings
            .overlap_threshold
            .unwrap_or(DEFAULT_OVERLAP_THRESHOLD);
        let backend = BackendSpec::parse(settings.backend.as_deref().unwrap_or("oracle"))?;
        let config = Self {
            mode,
            color_source,
            colors,
            alpha,
            capacity,
            overlap_threshold,
            backend,
            seed: settings.seed.unwrap_or(0),
            shots: settings.shots.unwrap_or(0),
            splits: settings.splits.unwrap_or(DEFAULT_SPLITS),
            val_size: settings.val_size.unwrap_or(DEFAULT_VAL_SIZE),
            probe: settings.probe.unwrap_or_default(),
            shape: settings.shape.unwrap_or_default(),
        };
        config.grounding().validate()?;
        Ok(config)
    }

    pub fn grounding(&self) -> GroundingConfig {
        GroundingConfig {
            colors: self.colors.clone(),
            alpha: self.alpha,
            capacity: self.capacity,
            overlap_threshold: self.overlap_threshold,
            shape: self.shape,
        }
    }

    pub fn echo(&self, backend_id: String) -> RunEcho {
        let extra = [
            ("mode", json!(self.mode)),
            ("color_source", json!(self.color_source)),
            ("shape", json!(self.shape)),
            ("probe", json!(self.probe)),
            ("shots", json!(self.shots)),
            ("splits", json!(self.splits)),
            ("val_size", json!(self.val_size)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        RunEcho {
            color_set: self.colors.clone(),
            alpha: self.alpha.get(),
            batch_capacity: self.capacity,
            overlap_threshold: self.overlap_threshold,
            backend_id,
            seed: self.seed,
            extra,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 6)]
    pub max_proposals: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transparency recorded in each scene for the oracle.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ColorizeArgs {
    /// Dataset directory or its `data.jsonl`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunSettings,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Candidate color table; the built-in named colors by default.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DISCARD_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_RADIUS)]
    pub radius: u32,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    pub step: u32,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: u32,
    /// Reuse a saved score matrix instead of probing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep only the best N colors.
    #[arg(long)]
    pub top: Option<usize>,
    #[command(flatten)]
    pub run: RunSettings,
}

#[derive(Debug, Args)]
pub struct GroundArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunSettings,
}

#[derive(Debug, Args)]
pub struct RelationsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Relation labels, one per line.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cutoffs for R@n and mR@n.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 50, 100])]
    pub n: Vec<usize>,
    #[command(flatten)]
    pub run: RunSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Grounding,
    Relations,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// One predictions file for all splits, or one per split in order.
    #[arg(long, required = true)]
    pub predictions: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::Grounding)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [20, 50, 100])]
    pub n: Vec<usize>,
    #[command(flatten)]
    pub run: RunSettings,
}

/// Runs `cli` on a pool of `--jobs` threads and returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    if cli.jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    let file = match &cli.config {
        Some(path) => RunSettings::load(path)?,
        None => RunSettings::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Colorize(a) => {
            let config = RunConfig::resolve(a.run.clone().over(file))?;
            cmd_colorize(&a.dataset, &a.out, &config)
        }
        Command::SearchColors(a) => {
            let config = RunConfig::resolve(a.run.clone().over(file))?;
            cmd_search_colors(&a, &config)
        }
        Command::Ground(a) => {
            let config = RunConfig::resolve(a.run.clone().over(file))?;
            cmd_ground(&a.dataset, &a.out, &config).map(|s| s.text)
        }
        Command::Relations(a) => {
            let settings = a.run.clone().over(file);
            let explicit_colors = settings.colors.is_some();
            let mut config = RunConfig::resolve(settings)?;
            if !explicit_colors && config.colors.len() < 2 {
                config.color_source = "cps".into();
                config.colors = preset_cps_colors();
            }
            cmd_relations(&a, &config)
        }
        Command::Evaluate(a) => {
            let config = RunConfig::resolve(a.run.clone().over(file))?;
            cmd_evaluate(&a, &config)
        }
    })
}

/// A dataset argument names either a directory holding `data.jsonl` or the
/// JSONL file itself; image paths resolve against the file's directory.
pub fn resolve_dataset(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(DATA_FILE), path.to_path_buf())
    } else {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        (path.to_path_buf(), base)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    if args.scenes == 0 || args.max_proposals == 0 {
        return Err(invalid("--scenes and --max-proposals must be at least 1"));
    }
    Transparency::new(args.alpha)?;
    let config = SynthConfig {
        alpha: args.alpha,
        ..SynthConfig::new(args.scenes, args.max_proposals, args.seed)
    };
    let data = generate_synthetic_grounding(&config);
    data.save(&args.out)?;
    Ok(format!(
        "wrote {} scenes to {}\n",
        data.instances.len(),
        args.out.display()
    ))
}

#[derive(Serialize)]
struct ManifestAssignment {
    proposal: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    color: String,
    rgb: String,
}

#[derive(Serialize)]
struct ManifestLine {
    id: String,
    batch: usize,
    file: String,
    assignments: Vec<ManifestAssignment>,
}

/// One PNG per (instance, batch) under `out/images` plus a manifest.
pub fn cmd_colorize(dataset: &Path, out: &Path, config: &RunConfig) -> Result<String> {
    let (file, base) = resolve_dataset(dataset);
    let mut instances = load_grounding(&file)?;
    instances.sort_by(|a, b| a.id.cmp(&b.id));
    create_dir(&out.join(IMAGES_DIR))?;
    let grounding = config.grounding();
    let mut manifest = Vec::new();
    for inst in &instances {
        let image = load_image(&base, &inst.image)?;
        let regions = load_regions(inst, &base)?;
        let (_, batches) = colorize(&image, &regions, &grounding)
            .map_err(|e| invalid(format!("{}: {e}", inst.id)))?;
        for (b, batch) in batches.iter().enumerate() {
            let rel = format!("{IMAGES_DIR}/{}_b{b}.png", inst.id);
            write_file(&out.join(&rel), &batch.image.to_png_bytes()?)?;
            manifest.push(ManifestLine {
                id: inst.id.clone(),
                batch: b,
                file: rel,
                assignments: batch
                    .assignments
                    .iter()
                    .map(|(i, c)| ManifestAssignment {
                        proposal: *i,
                        bbox: regions[*i].bbox.to_array(),
                        color: c.text.to_string(),
                        rgb: c.visual.to_string(),
                    })
                    .collect(),
            });
        }
    }
    save_jsonl(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(format!(
        "wrote {} overlays for {} instances to {}\n",
        manifest.len(),
        instances.len(),
        out.display()
    ))
}

/// Probes (or reloads) the score matrix, then selects colors from it.
pub fn cmd_search_colors(args: &SearchArgs, config: &RunConfig) -> Result<String> {
    if args.threshold.is_nan() || args.threshold < 0.0 {
        return Err(invalid(format!(
            "discard threshold must be at least 0, got {}",
            args.threshold
        )));
    }
    let table = match &args.candidates {
        Some(path) => NamedColorTable::parse(&read_text(path)?)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?,
        None => NamedColorTable::builtin(),
    };
    let matrix = match &args.resume {
        Some(path) => ScoreMatrix::load(path)?,
        None => {
            let step =
                NonZeroU32::new(args.step).ok_or_else(|| invalid("--step must be positive"))?;
            let candidates = CandidateSets::from_table_grid(&table, args.radius, step)?;
            match &config.backend {
                BackendSpec::Planted(path) => {
                    let planted = load_colors(&path.display().to_string())?;
                    probe_surface(&PlantedSurface::new(&planted), &candidates)?
                }
                spec => {
                    let backend = spec.build_with(ChromaticOracle::with_table(&table))?;
                    probe_scores(
                        &*backend,
                        &candidates,
                        &cps_probe_template(config.probe),
                        args.block_size,
                    )?
                }
            }
        }
    };
    create_dir(&args.out)?;
    matrix.save(&args.out.join(MATRIX_FILE))?;
    // Decoding scores are probabilities, so nothing survives a threshold above 1.
    let found = if args.threshold > 1.0 {
        Err(CpsError::AllDiscarded(args.threshold))
    } else {
        search(&matrix, args.threshold)
    }?;
    let found = match args.top {
        Some(0) => return Err(invalid("--top must be at least 1")),
        Some(n) => found.truncated(n)?,
        None => found,
    };
    write_file(&args.out.join(COLORS_FILE), found.to_table().as_bytes())?;
    let mut text = format!(
        "{} x {} score matrix, {} colors selected\n",
        matrix.visuals().len(),
        matrix.texts().len(),
        found.len()
    );
    for color in &found {
        let _ = writeln!(text, "{}\t{}", color.text, color.visual);
    }
    Ok(text)
}

pub struct GroundSummary {
    pub run: DatasetRun<PredictionRecord>,
    pub accuracy: f64,
    pub text: String,
}

pub fn cmd_ground(dataset: &Path, out: &Path, config: &RunConfig) -> Result<GroundSummary> {
    let backend = config.backend.build(&config.colors)?;
    cmd_ground_with(&*backend, dataset, out, config)
}

/// Grounds a dataset against `backend`, writing predictions and a report.
/// Fails with a backend error when every instance failed that way.
pub fn cmd_ground_with(
    backend: &dyn ScoringBackend,
    dataset: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<GroundSummary> {
    let (file, base) = resolve_dataset(dataset);
    let instances = load_grounding(&file)?;
    if instances.is_empty() {
        return Err(CliError::Empty(format!(
            "{} has no instances",
            file.display()
        )));
    }
    let run = ground_dataset(backend, &instances, &base, &config.grounding())?;
    create_dir(out)?;
    save_jsonl(&out.join(PREDICTIONS_FILE), &run.records)?;
    let metrics = grounding_metrics(&instances, &run.records);
    let accuracy = metrics["accuracy"];
    let echo = config.echo(backend.backend_id());
    let report = RunReport {
        config: echo,
        metrics: aggregate(&[metrics])?,
    };
    report.save(&out.join(REPORT_FILE))?;
    if run.backend_failures == run.records.len() {
        let first = run.records.iter().find_map(|r| r.error.clone());
        return Err(CliError::Backend(first.unwrap_or_default()));
    }
    let mut text = report.metrics.to_human();
    let failed = run.backend_failures + run.other_failures;
    if failed > 0 {
        let _ = writeln!(text, "{failed} of {} instances failed", run.records.len());
    }
    Ok(GroundSummary {
        run,
        accuracy,
        text,
    })
}

fn load_vocab(path: &Path) -> Result<Vec<RelationEntry>> {
    let mut seen = BTreeSet::new();
    let vocab: Vec<RelationEntry> = read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(RelationEntry::from_label)
        .filter(|e| seen.insert(e.label.clone()))
        .collect();
    if vocab.is_empty() {
        return Err(invalid(format!("{}: no relation labels", path.display())));
    }
    Ok(vocab)
}

pub fn cmd_relations(args: &RelationsArgs, config: &RunConfig) -> Result<String> {
    let (file, base) = resolve_dataset(&args.dataset);
    let instances = load_relations(&file)?;
    if instances.is_empty() {
        return Err(CliError::Empty(format!(
            "{} has no instances",
            file.display()
        )));
    }
    let relation = RelationConfig {
        colors: config.colors.clone(),
        alpha: config.alpha,
        shape: config.shape,
        vocab: load_vocab(&args.vocab)?,
    };
    let backend = config.backend.build(&config.colors)?;
    let run = relations_dataset(&*backend, &instances, &base, &relation);
    create_dir(&args.out)?;
    save_jsonl(&args.out.join(PREDICTIONS_FILE), &run.records)?;
    let metrics = relation_metrics(&rank_images(&instances, &run.records), &args.n);
    let report = RunReport {
        config: config.echo(backend.backend_id()),
        metrics: aggregate(&[metrics])?,
    };
    report.save(&args.out.join(REPORT_FILE))?;
    if run.backend_failures == run.records.len() {
        let first = run.records.iter().find_map(|r| r.error.clone());
        return Err(CliError::Backend(first.unwrap_or_default()));
    }
    Ok(report.metrics.to_human())
}

fn split_spec(config: &RunConfig, mode: ShotMode) -> SplitSpec {
    SplitSpec {
        k_shots: config.shots,
        n_splits: config.splits,
        seed: config.seed,
        val_size: config.val_size,
        mode,
    }
}

/// Picks the predictions for split `i`: a single file serves every split.
fn per_split<T>(files: &[Vec<T>], i: usize) -> &[T] {
    if files.len() == 1 {
        &files[0]
    } else {
        &files[i]
    }
}

fn load_prediction_files<T: serde::de::DeserializeOwned>(
    paths: &[PathBuf],
    n_splits: usize,
) -> Result<Vec<Vec<T>>> {
    if paths.len() != 1 && paths.len() != n_splits {
        return Err(invalid(format!(
            "got {} prediction files for {n_splits} splits; pass one or one per split",
            paths.len()
        )));
    }
    paths
        .iter()
        .map(|p| Ok(load_jsonl_records(&resolve_prediction_path(p))?))
        .collect()
}

/// A predictions argument names the file or the run directory holding it.
fn resolve_prediction_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(PREDICTIONS_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Instances evaluated for a split: everything outside its train and
/// validation ids, and outside the training pool when one is marked.
fn held_out<'a, T>(
    items: &'a [T],
    split: &Split,
    id: impl Fn(&T) -> &str,
    in_pool: impl Fn(&T) -> bool,
    pool_is_subset: bool,
) -> (Vec<&'a T>, Vec<&'a T>) {
    let used: BTreeSet<&str> = split
        .train
        .iter()
        .chain(&split.val)
        .map(String::as_str)
        .collect();
    let val_ids: BTreeSet<&str> = split.val.iter().map(String::as_str).collect();
    let eval = items
        .iter()
        .filter(|t| !used.contains(id(t)) && !(pool_is_subset && in_pool(t)))
        .collect();
    let val = items.iter().filter(|t| val_ids.contains(id(t))).collect();
    (eval, val)
}

const TRAIN_SPLIT: &str = "train";

pub fn cmd_evaluate(args: &EvaluateArgs, config: &RunConfig) -> Result<String> {
    let (file, _) = resolve_dataset(&args.dataset);
    let (splits, per_split_metrics) = match args.task {
        Task::Grounding => {
            let instances = load_grounding(&file)?;
            let files: Vec<Vec<PredictionRecord>> =
                load_prediction_files(&args.predictions, config.splits)?;
            let marked = instances.iter().any(|i| i.split == TRAIN_SPLIT);
            let pool: Vec<String> = instances
                .iter()
                .filter(|i| !marked || i.split == TRAIN_SPLIT)
                .map(|i| i.id.clone())
                .collect();
            let splits = sample_splits(&pool, &split_spec(config, ShotMode::Total))?;
            let metrics = splits
                .iter()
                .map(|split| {
                    let preds = per_split(&files, split.index);
                    let (eval, val) = held_out(
                        &instances,
                        split,
                        |i| i.id.as_str(),
                        |i| i.split == TRAIN_SPLIT,
                        marked,
                    );
                    let mut m = grounding_metrics(&owned(&eval), preds);
                    if !val.is_empty() {
                        let v = grounding_metrics(&owned(&val), preds);
                        m.insert("val_accuracy".into(), v["accuracy"]);
                    }
                    m
                })
                .collect::<Vec<MetricMap>>();
            (splits, metrics)
        }
        Task::Relations => {
            let instances = load_relations(&file)?;
            let files: Vec<Vec<RelationPrediction>> =
                load_prediction_files(&args.predictions, config.splits)?;
            let marked = instances.iter().any(|i| i.split == TRAIN_SPLIT);
            let pool: Vec<(String, String)> = instances
                .iter()
                .filter(|i| !marked || i.split == TRAIN_SPLIT)
                .flat_map(|i| i.gold_relations.iter().map(|g| (i.id.clone(), g.clone())))
                .collect();
            let splits = sample_splits_per_class(&pool, &split_spec(config, ShotMode::PerClass))?;
            let metrics = splits
                .iter()
                .map(|split| {
                    let preds = per_split(&files, split.index);
                    let (eval, val) = held_out(
                        &instances,
                        split,
                        |i| i.id.as_str(),
                        |i| i.split == TRAIN_SPLIT,
                        marked,
                    );
                    let mut m = relation_metrics(&rank_images(&owned(&eval), preds), &args.n);
                    if !val.is_empty() {
                        let v = relation_metrics(&rank_images(&owned(&val), preds), &args.n);
                        m.extend(v.into_iter().map(|(k, v)| (format!("val_{k}"), v)));
                    }
                    m
                })
                .collect::<Vec<MetricMap>>();
            (splits, metrics)
        }
    };
    let report: MetricReport = aggregate(&per_split_metrics)?;
    create_dir(&args.out)?;
    write_file(
        &args.out.join(SPLITS_FILE),
        splits_to_tsv(&splits).as_bytes(),
    )?;
    let mut echo = config.echo(config.backend.label());
    echo.extra.insert(
        "task".into(),
        Value::from(match args.task {
            Task::Grounding => "grounding",
            Task::Relations => "relations",
        }),
    );
    echo.extra.insert(
        "predictions".into(),
        json!(args
            .predictions
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()),
    );
    RunReport {
        config: echo,
        metrics: report.clone(),
    }
    .save(&args.out.join(REPORT_FILE))?;
    Ok(report.to_human())
}

fn owned<T: Clone>(items: &[&T]) -> Vec<T> {
    items.iter().map(|t| (*t).clone()).collect()
}

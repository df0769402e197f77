//! Command-level behavior, through the library entry point and the binary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use cpt_cli::{run, Cli, CliError};
use cpt_core::batching::plan_batches;
use cpt_core::colorspec::{Color, ColorSet, NamedColorTable};
use cpt_core::cps::{PlantedSurface, ScoreMatrix};
use cpt_core::dataio::{
    generate_synthetic_grounding, load_jsonl_records, save_jsonl, Entity, GroundingInstance,
    PredictionRecord, Proposal, RelationInstance, RelationPrediction, RunReport, SynthConfig,
};
use cpt_core::prompt::na_relation;
use cpt_core::raster::{BoundingBox, RasterImage};
use cpt_core::Rgb;
use tempfile::TempDir;

fn cpt(args: &[&str]) -> Result<String, CliError> {
    let mut argv = vec!["cpt"];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv).expect("arguments parse"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, scenes: usize, seed: u64) -> PathBuf {
    let out = dir.join("data");
    let scenes = scenes.to_string();
    let seed = seed.to_string();
    cpt(&[
        "synth",
        "--out",
        p(&out),
        "--scenes",
        &scenes,
        "--seed",
        &seed,
    ])
    .unwrap();
    out
}

fn bbox(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

/// Writes a one-instance grounding dataset with the given proposals.
fn small_dataset(dir: &Path, proposals: Vec<BoundingBox>) -> PathBuf {
    let data = dir.join("small");
    std::fs::create_dir_all(data.join("images")).unwrap();
    RasterImage::filled(64, 64, Rgb::new(128, 128, 128))
        .unwrap()
        .save_png(&data.join("images/a.png"))
        .unwrap();
    let inst = GroundingInstance {
        id: "a".into(),
        image: "images/a.png".into(),
        query: "target 0".into(),
        gold_box: proposals[0],
        proposals: proposals.into_iter().map(Proposal::from_box).collect(),
        split: "test".into(),
        meta: Default::default(),
    };
    save_jsonl(&data.join("data.jsonl"), &[inst]).unwrap();
    data
}

fn files_under(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect()
}

#[test]
fn colorize_single_batch_writes_one_image_and_line() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), vec![bbox(0.0, 0.0, 8.0, 8.0)]);
    let out = tmp.path().join("c1");
    cpt(&["colorize", "--dataset", p(&data), "--out", p(&out)]).unwrap();
    assert_eq!(files_under(&out.join("images")).len(), 1);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);

    let again = tmp.path().join("c2");
    cpt(&["colorize", "--dataset", p(&data), "--out", p(&again)]).unwrap();
    for name in ["manifest.jsonl", "images/a_b0.png"] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap()
        );
    }
}

#[test]
fn colorize_image_count_follows_the_batch_plan() {
    let tmp = TempDir::new().unwrap();
    let boxes = vec![
        bbox(0.0, 0.0, 10.0, 10.0),
        bbox(20.0, 0.0, 10.0, 10.0),
        bbox(0.0, 20.0, 10.0, 10.0),
    ];
    let data = small_dataset(tmp.path(), boxes.clone());
    for (capacity, colors) in [("1", "red"), ("3", "cps")] {
        let out = tmp.path().join(format!("cap{capacity}"));
        cpt(&[
            "colorize",
            "--dataset",
            p(&data),
            "--out",
            p(&out),
            "--colors",
            colors,
            "--capacity",
            capacity,
        ])
        .unwrap();
        let expected = plan_batches(&boxes, capacity.parse().unwrap(), 0.5)
            .unwrap()
            .batches
            .len();
        assert_eq!(files_under(&out.join("images")).len(), expected);
    }
    assert_eq!(files_under(&tmp.path().join("cap1/images")).len(), 3);
}

#[test]
fn ground_synthetic_with_oracle_is_exact_and_job_count_independent() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 30, 3);
    let one = tmp.path().join("one");
    let four = tmp.path().join("four");
    let text = cpt(&["ground", "--dataset", p(&data), "--out", p(&one)]).unwrap();
    assert!(text.contains("accuracy: 1.0000"), "{text}");
    cpt(&[
        "--jobs",
        "4",
        "ground",
        "--dataset",
        p(&data),
        "--out",
        p(&four),
    ])
    .unwrap();
    let strip = |dir: &Path| -> Vec<PredictionRecord> {
        load_jsonl_records::<PredictionRecord>(&dir.join("predictions.jsonl"))
            .unwrap()
            .into_iter()
            .map(|r| PredictionRecord { elapsed_ms: 0, ..r })
            .collect()
    };
    assert_eq!(strip(&one), strip(&four));
    assert_eq!(
        std::fs::read(one.join("report.json")).unwrap(),
        std::fs::read(four.join("report.json")).unwrap()
    );
    let report = RunReport::load(&one.join("report.json")).unwrap();
    assert_eq!(report.config.batch_capacity, 1);
    assert_eq!(report.config.alpha, 0.5);
    assert_eq!(report.config.backend_id, "chromatic-oracle");
}

#[test]
fn missing_image_becomes_an_error_record() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 5, 1);
    std::fs::remove_file(data.join("images/scene00002.png")).unwrap();
    let out = tmp.path().join("g");
    let text = cpt(&["ground", "--dataset", p(&data), "--out", p(&out)]).unwrap();
    assert!(text.contains("1 of 5 instances failed"), "{text}");
    let records: Vec<PredictionRecord> =
        load_jsonl_records(&out.join("predictions.jsonl")).unwrap();
    assert_eq!(records.len(), 5);
    let failed: Vec<_> = records.iter().filter(|r| r.error.is_some()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].id, "scene00002");
    assert!(text.contains("accuracy: 0.8000"), "{text}");
}

#[test]
fn config_file_is_layered_under_flags() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 8, 2);
    std::fs::write(
        tmp.path().join("my_colors.tsv"),
        "red\t240,0,30\npurple\t155,50,210\nyellow\t255,255,25\n",
    )
    .unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        "mode = \"toolkit\"\ncolors = \"my_colors.tsv\"\nalpha = 0.4\nseed = 11\n",
    )
    .unwrap();
    let out = tmp.path().join("g");
    cpt(&[
        "--config",
        p(&config),
        "ground",
        "--dataset",
        p(&data),
        "--out",
        p(&out),
        "--alpha",
        "0.6",
    ])
    .unwrap();
    let report = RunReport::load(&out.join("report.json")).unwrap();
    assert_eq!(
        report.config.batch_capacity, 3,
        "toolkit capacity capped by colors"
    );
    assert_eq!(report.config.alpha, 0.6);
    assert_eq!(report.config.seed, 11);
    assert_eq!(report.config.color_set.len(), 3);

    std::fs::write(&config, "colour = \"red\"\n").unwrap();
    let err = cpt(&[
        "--config",
        p(&config),
        "ground",
        "--dataset",
        p(&data),
        "--out",
        p(&out),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

fn planted_set() -> ColorSet {
    ColorSet::new(vec![
        Color::named((240, 0, 30), "red"),
        Color::named((0, 10, 255), "blue"),
        Color::named((0, 255, 0), "green"),
    ])
    .unwrap()
}

#[test]
fn search_colors_recovers_a_planted_set_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let planted = tmp.path().join("planted.tsv");
    std::fs::write(&planted, planted_set().to_table()).unwrap();
    let candidates = tmp.path().join("candidates.tsv");
    std::fs::write(&candidates, "red\t255,0,0\nblue\t0,0,255\ngreen\t0,255,0\n").unwrap();
    let out = tmp.path().join("s");
    let backend = format!("planted:{}", p(&planted));
    let args = [
        "search-colors",
        "--candidates",
        p(&candidates),
        "--out",
        p(&out),
        "--backend",
        &backend,
    ];
    cpt(&args).unwrap();
    let found =
        ColorSet::from_table(&std::fs::read_to_string(out.join("colors.tsv")).unwrap()).unwrap();
    let as_set = |c: &ColorSet| -> BTreeSet<(Rgb, String)> {
        c.iter().map(|c| (c.visual, c.text.to_string())).collect()
    };
    assert_eq!(as_set(&found), as_set(&planted_set()));

    // The persisted matrix is the closed-form surface, entry for entry.
    let matrix = ScoreMatrix::load(&out.join("score_matrix.tsv")).unwrap();
    let surface = PlantedSurface::new(&planted_set());
    for (row, &v) in matrix.visuals().iter().enumerate() {
        for (col, t) in matrix.texts().iter().enumerate() {
            assert_eq!(matrix.get(row, col), surface.score(v, t.as_str()));
        }
    }

    // Resuming never touches the backend, so an unreachable one is fine.
    let resumed = tmp.path().join("r");
    let matrix_path = out.join("score_matrix.tsv");
    cpt(&[
        "search-colors",
        "--out",
        p(&resumed),
        "--resume",
        p(&matrix_path),
        "--backend",
        "http://127.0.0.1:1",
    ])
    .unwrap();
    assert_eq!(
        std::fs::read(out.join("colors.tsv")).unwrap(),
        std::fs::read(resumed.join("colors.tsv")).unwrap()
    );

    let top = tmp.path().join("top");
    cpt(&[
        "search-colors",
        "--out",
        p(&top),
        "--resume",
        p(&matrix_path),
        "--top",
        "1",
    ])
    .unwrap();
    let one =
        ColorSet::from_table(&std::fs::read_to_string(top.join("colors.tsv")).unwrap()).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.get(0), found.get(0));
}

#[test]
fn search_colors_with_oracle_finds_table_colors() {
    let tmp = TempDir::new().unwrap();
    let candidates = tmp.path().join("candidates.tsv");
    std::fs::write(&candidates, "red\t255,0,0\nblue\t0,0,255\n").unwrap();
    let out = tmp.path().join("s");
    cpt(&[
        "search-colors",
        "--candidates",
        p(&candidates),
        "--out",
        p(&out),
        "--radius",
        "10",
        "--step",
        "10",
        "--block-size",
        "4",
    ])
    .unwrap();
    let found =
        ColorSet::from_table(&std::fs::read_to_string(out.join("colors.tsv")).unwrap()).unwrap();
    let table = NamedColorTable::parse("red\t255,0,0\nblue\t0,0,255\n").unwrap();
    let texts: BTreeSet<String> = found.iter().map(|c| c.text.to_string()).collect();
    assert_eq!(
        texts,
        BTreeSet::from(["blue".to_string(), "red".to_string()])
    );
    // Each chosen visual lies on the grid around its own reference and is a
    // column maximum of the saved matrix.
    let matrix = ScoreMatrix::load(&out.join("score_matrix.tsv")).unwrap();
    for color in &found {
        let reference = table.lookup(color.text.as_str()).unwrap();
        assert!(color.visual.l1(reference) <= 30, "{color:?}");
        let col = matrix
            .texts()
            .iter()
            .position(|t| *t == color.text)
            .unwrap();
        let row = matrix
            .visuals()
            .iter()
            .position(|v| *v == color.visual)
            .unwrap();
        let best = (0..matrix.visuals().len())
            .map(|r| matrix.get(r, col))
            .fold(f64::MIN, f64::max);
        assert_eq!(matrix.get(row, col), best);
    }
}

fn relation_dataset(dir: &Path, gold: &[&str]) -> PathBuf {
    let data = dir.join("rel");
    std::fs::create_dir_all(data.join("images")).unwrap();
    RasterImage::filled(32, 32, Rgb::new(90, 90, 90))
        .unwrap()
        .save_png(&data.join("images/x.png"))
        .unwrap();
    let inst = RelationInstance {
        id: "pair0".into(),
        image: "images/x.png".into(),
        subject: Entity {
            text: "man".into(),
            bbox: bbox(0.0, 0.0, 10.0, 10.0),
            id: None,
        },
        object: Entity {
            text: "horse".into(),
            bbox: bbox(12.0, 12.0, 10.0, 10.0),
            id: None,
        },
        gold_relations: gold.iter().map(|s| s.to_string()).collect(),
        split: "test".into(),
    };
    save_jsonl(&data.join("data.jsonl"), &[inst]).unwrap();
    data
}

#[test]
fn relations_rank_vocabulary_and_skip_na() {
    let tmp = TempDir::new().unwrap();
    let data = relation_dataset(tmp.path(), &["riding"]);
    let vocab = tmp.path().join("vocab.txt");
    std::fs::write(&vocab, "riding\n").unwrap();
    let out = tmp.path().join("r");
    let text = cpt(&[
        "relations",
        "--dataset",
        p(&data),
        "--vocab",
        p(&vocab),
        "--out",
        p(&out),
        "--backend",
        "stub",
        "--n",
        "1",
    ])
    .unwrap();
    assert!(text.contains("R@1: 1.0000"), "{text}");

    std::fs::write(&vocab, "riding\nwalking on\nparked next to\nnear\n").unwrap();
    cpt(&[
        "relations",
        "--dataset",
        p(&data),
        "--vocab",
        p(&vocab),
        "--out",
        p(&out),
        "--backend",
        "stub",
    ])
    .unwrap();
    let preds: Vec<RelationPrediction> =
        load_jsonl_records(&out.join("predictions.jsonl")).unwrap();
    let ranked: BTreeSet<&str> = preds[0].ranked.iter().map(String::as_str).collect();
    assert_eq!(
        ranked,
        BTreeSet::from(["riding", "walking on", "parked next to", "near"])
    );
    for l in 1..=3 {
        let na = na_relation(l).unwrap().tokens.join(" ");
        assert!(!ranked.contains(na.as_str()));
        assert!(preds[0].na_scores.contains_key(&l));
    }
}

#[test]
fn evaluate_reports_every_split_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 30, 9);
    let g = tmp.path().join("g");
    cpt(&["ground", "--dataset", p(&data), "--out", p(&g)]).unwrap();
    let eval = |name: &str, splits: &str| {
        let out = tmp.path().join(name);
        let text = cpt(&[
            "evaluate",
            "--dataset",
            p(&data),
            "--predictions",
            p(&g),
            "--out",
            p(&out),
            "--shots",
            "2",
            "--val-size",
            "4",
            "--splits",
            splits,
            "--seed",
            "5",
        ])
        .unwrap();
        (out, text)
    };
    let (a, text) = eval("e1", "5");
    assert_eq!(text.lines().filter(|l| l.starts_with("split ")).count(), 5);
    let report = RunReport::load(&a.join("report.json")).unwrap();
    assert_eq!(report.metrics.per_split.len(), 5);
    assert_eq!(report.metrics.mean["accuracy"], 1.0);
    let (b, _) = eval("e2", "5");
    for f in ["splits.tsv", "report.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    let (c, _) = eval("e3", "1");
    let report = RunReport::load(&c.join("report.json")).unwrap();
    assert_eq!(report.metrics.std["accuracy"], 0.0);
}

#[test]
fn zero_shot_evaluation_needs_no_training_data() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 6, 4);
    let g = tmp.path().join("g");
    cpt(&["ground", "--dataset", p(&data), "--out", p(&g)]).unwrap();
    let out = tmp.path().join("e");
    cpt(&[
        "evaluate",
        "--dataset",
        p(&data),
        "--predictions",
        p(&g.join("predictions.jsonl")),
        "--out",
        p(&out),
        "--val-size",
        "0",
    ])
    .unwrap();
    let splits = std::fs::read_to_string(out.join("splits.tsv")).unwrap();
    assert!(splits.lines().all(|l| l.ends_with("\t\t")), "{splits:?}");
}

fn binary(args: &[&str]) -> i32 {
    Process::new(env!("CARGO_BIN_EXE_cpt"))
        .args(args)
        .env_remove("CPT_BACKEND_URL")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 3, 1);
    let out = tmp.path().join("o");
    let (d, o) = (p(&data), p(&out));
    assert_eq!(binary(&["ground", "--dataset", d, "--out", o]), 0);
    assert_eq!(
        binary(&["ground", "--dataset", d, "--out", o, "--alpha", "1.5"]),
        2
    );
    assert_eq!(binary(&["ground", "--bogus"]), 2);
    assert_eq!(
        binary(&["ground", "--dataset", d, "--out", o, "--backend", "remote"]),
        2
    );
    assert_eq!(
        binary(&[
            "ground",
            "--dataset",
            d,
            "--out",
            o,
            "--backend",
            "http://127.0.0.1:1"
        ]),
        3
    );
    let matrix = tmp.path().join("m.tsv");
    std::fs::write(&matrix, "rgb\tred\n1,2,3\t0.5\n").unwrap();
    let m = p(&matrix);
    assert_eq!(binary(&["search-colors", "--out", o, "--resume", m]), 4);
    assert_eq!(
        binary(&[
            "search-colors",
            "--out",
            o,
            "--resume",
            m,
            "--threshold",
            "1.1"
        ]),
        4
    );
    assert_eq!(
        binary(&[
            "search-colors",
            "--out",
            o,
            "--resume",
            m,
            "--threshold",
            "0.4"
        ]),
        0
    );
}

#[test]
fn synthetic_generation_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        cpt(&["synth", "--out", p(dir), "--scenes", "4", "--seed", "8"]).unwrap();
    }
    assert_eq!(
        std::fs::read(a.join("data.jsonl")).unwrap(),
        std::fs::read(b.join("data.jsonl")).unwrap()
    );
    let expected = generate_synthetic_grounding(&SynthConfig::new(4, 6, 8));
    let loaded: Vec<GroundingInstance> = load_jsonl_records(&a.join("data.jsonl")).unwrap();
    assert_eq!(loaded, expected.instances);
}

fn repo_data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

#[test]
fn checked_in_samples_are_current() {
    let tmp = TempDir::new().unwrap();
    let sample = repo_data("sample");
    let fresh = tmp.path().join("fresh");
    cpt(&["synth", "--out", p(&fresh), "--scenes", "50", "--seed", "0"]).unwrap();
    assert_eq!(
        std::fs::read(sample.join("data.jsonl")).unwrap(),
        std::fs::read(fresh.join("data.jsonl")).unwrap()
    );
    let text = cpt(&[
        "ground",
        "--dataset",
        p(&sample),
        "--out",
        p(&tmp.path().join("g")),
        "--mode",
        "toolkit",
    ])
    .unwrap();
    assert!(text.contains("accuracy: 1.0000"), "{text}");

    let relations = repo_data("relations_sample");
    let out = tmp.path().join("r");
    cpt(&[
        "relations",
        "--dataset",
        p(&relations),
        "--vocab",
        p(&relations.join("vocab.txt")),
        "--out",
        p(&out),
        "--backend",
        "stub",
    ])
    .unwrap();
    let preds: Vec<RelationPrediction> =
        load_jsonl_records(&out.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.len(), 6);
    assert!(preds
        .iter()
        .all(|p| p.error.is_none() && p.ranked.len() == 8));
}

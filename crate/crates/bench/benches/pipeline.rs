use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cpt_bench::{random_boxes, random_logits, scene_with};
use cpt_core::backend::ChromaticOracle;
use cpt_core::batching::plan_batches;
use cpt_core::colorspec::{preset_cps_colors, CandidateSets, NamedColorTable};
use cpt_core::cps::{probe_surface, search, PlantedSurface};
use cpt_core::pipeline::{ground, GroundingConfig};
use cpt_core::raster::{blend_block, BoundingBox, RasterImage};
use cpt_core::scoring::normalize;
use cpt_core::Rgb;

fn blending(c: &mut Criterion) {
    let img = RasterImage::filled(224, 224, Rgb::new(128, 128, 128)).unwrap();
    let bbox = BoundingBox::new(16.0, 16.0, 160.0, 120.0).unwrap();
    c.bench_function("blend_block_224", |b| {
        b.iter(|| blend_block(black_box(&img), &bbox, Rgb::new(240, 0, 30), 0.5).unwrap())
    });
}

fn batching(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan_batches");
    for n in [10, 100, 400] {
        let boxes = random_boxes(n, 640.0, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &boxes, |b, boxes| {
            b.iter(|| plan_batches(black_box(boxes), 6, 0.5).unwrap())
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let logits = random_logits(64, 2);
    c.bench_function("normalize_64", |b| {
        b.iter(|| normalize(black_box(&logits)).unwrap())
    });
}

fn grounding(c: &mut Criterion) {
    let scene = scene_with(6, 3);
    let mut group = c.benchmark_group("ground_scene");
    for (name, config) in [
        ("capacity6", GroundingConfig::toolkit()),
        (
            "capacity1",
            GroundingConfig {
                capacity: 1,
                ..GroundingConfig::toolkit()
            },
        ),
    ] {
        let oracle = ChromaticOracle::default().with_colors(&config.colors);
        group.bench_function(name, |b| {
            b.iter(|| {
                ground(
                    &oracle,
                    &scene.image,
                    &scene.regions,
                    &scene.query,
                    &scene.meta,
                    &config,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn color_search(c: &mut Criterion) {
    let planted = preset_cps_colors();
    let table = NamedColorTable::parse(&planted.to_table()).unwrap();
    let candidates = CandidateSets::from_table_grid(&table, 30, 5.try_into().unwrap()).unwrap();
    let surface = PlantedSurface::new(&planted);
    let mut group = c.benchmark_group("cps");
    group.sample_size(20);
    group.bench_function("probe_planted", |b| {
        b.iter(|| probe_surface(&surface, black_box(&candidates)).unwrap())
    });
    let matrix = probe_surface(&surface, &candidates).unwrap();
    group.bench_function("search", |b| {
        b.iter(|| search(black_box(&matrix), 0.8).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    blending,
    batching,
    softmax,
    grounding,
    color_search
);
criterion_main!(benches);

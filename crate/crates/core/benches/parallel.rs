//! Parallel against sequential execution of the data-parallel stages.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ptz_core::pipeline::{calibrate, verified_graph, PipelineConfig};
use ptz_core::synth::{generate_scene, SceneConfig};

fn config(parallel: bool) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed: 3, parallel, ..Default::default() };
    cfg.scene = SceneConfig { num_views: 72, num_ref_views: 24, num_points: 3000, ..cfg.scene };
    cfg.ransac.threshold_px = 12.0;
    cfg.resolved()
}

fn modes(c: &mut Criterion) {
    let scene = generate_scene(&config(true).scene).expect("scene");
    let mut group = c.benchmark_group("verify");
    for parallel in [false, true] {
        let cfg = config(parallel);
        group.bench_with_input(BenchmarkId::from_parameter(mode(parallel)), &cfg, |b, cfg| {
            b.iter(|| verified_graph(black_box(&scene.offline_matches), &cfg.ransac, cfg.parallel).expect("graph"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("calibrate");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    for parallel in [false, true] {
        let cfg = config(parallel);
        group.bench_with_input(BenchmarkId::from_parameter(mode(parallel)), &cfg, |b, cfg| {
            b.iter(|| calibrate(black_box(&scene.offline_matches), cfg).expect("calibration"))
        });
    }
    group.finish();
}

fn mode(parallel: bool) -> &'static str {
    if parallel {
        "parallel"
    } else {
        "sequential"
    }
}

criterion_group!(benches, modes);
criterion_main!(benches);

//! Rayon pool vs. a single-thread pool on the data-parallel hot spots.
//! Build with `--no-default-features` to time the plain-iterator fallback.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pampose::data::{default_objects, random_pose, PoseRange};
use pampose::geometry::{nearest_neighbors, Point};
use pampose::harness::{estimate_scenes, eval_scenes, run_ablation, AblationSpec, RunConfig, TrainedModel};
use pampose::losses::adds_distance;
use pampose::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.1..0.1))).collect()
}

fn tiny_run() -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        "train.epochs=1",
        "train.scenes_per_epoch=6",
        "train.points=32",
        "net.width1=16",
        "net.width2=32",
        "net.head_width=16",
        "pam.reduction_ratio=4",
        "refine.epochs=1",
        "data.model_points=200",
        "data.eval_scenes=24",
    ] {
        c.set_str(kv).expect("valid override");
    }
    c
}

fn modes(c: &mut Criterion, group: &str, f: impl Fn() + Sync + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10).measurement_time(Duration::from_secs(3));
    g.bench_function(BenchmarkId::new("parallel", par::threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn geometry(c: &mut Criterion) {
    let (queries, targets) = (cloud(2000, 1), cloud(2000, 2));
    modes(c, "nearest_neighbors_2000", || {
        black_box(nearest_neighbors(&queries, &targets));
    });
    let model = default_objects(500, 3).expect("objects").remove(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random_pose(&mut rng, &PoseRange::default()), random_pose(&mut rng, &PoseRange::default()));
    modes(c, "adds_500", || {
        black_box(adds_distance(&model.points, &a, &b));
    });
}

fn harness(c: &mut Criterion) {
    let config = tiny_run();
    let model = TrainedModel::init(&config).expect("model");
    let scenes = eval_scenes(&config, &model.objects).expect("scenes");
    modes(c, "evaluate_24_scenes", || {
        black_box(estimate_scenes(&model, &scenes).expect("estimates"));
    });
    let spec = AblationSpec::reduction_ratios(config.clone(), &[4, 8, 16]);
    modes(c, "ablation_3_arms", || {
        black_box(run_ablation(&spec).expect("sweep"));
    });
}

criterion_group!(benches, geometry, harness);
criterion_main!(benches);

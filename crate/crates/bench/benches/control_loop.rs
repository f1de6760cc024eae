use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mbcbf_core::flow::integrate_backup_flow;
use mbcbf_core::intent::{FeatureVector, ModelConfig, RewardModel, Window, FEATURE_COUNT};
use mbcbf_core::qp::solve;
use mbcbf_core::sim::{EpisodeRunner, Scenario, Selector};
use mbcbf_core::{filter, HalfPlane, Input, InputBounds, PolicyId, QProblem, State};

fn near_obstacle() -> (Scenario, State) {
    let sc = Scenario::default();
    (sc, State::new(-1.1, 0.2, 0.1))
}

fn bench_flow_and_filter(c: &mut Criterion) {
    let (sc, x) = near_obstacle();
    let cfg = sc.filter.flow();
    c.bench_function("backup_flow_with_sensitivity", |b| {
        b.iter(|| integrate_backup_flow(black_box(&x), PolicyId(0), &sc.obstacles[0], &sc.policies, &cfg).unwrap())
    });
    c.bench_function("filter_tick", |b| {
        b.iter(|| {
            filter(black_box(&x), Input::new(0.5, 0.0), PolicyId(1), &sc.obstacles, &sc.filter, &sc.policies).unwrap()
        })
    });
}

fn bench_qp(c: &mut Criterion) {
    let p = QProblem {
        target: Input::new(0.5, 0.2),
        constraints: vec![
            HalfPlane::new([1.0, 0.3], 0.2),
            HalfPlane::new([-0.4, 1.0], -0.1),
            HalfPlane::new([0.7, -0.7], 0.05),
        ],
        bounds: InputBounds::new(0.5, 1.0).unwrap(),
    };
    c.bench_function("qp_three_constraints", |b| b.iter(|| solve(black_box(&p))));
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let steps = cfg.steps;
    let model = RewardModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let rows: Vec<FeatureVector> = (0..steps).map(|k| FeatureVector([0.1 * k as f64; FEATURE_COUNT])).collect();
    let window = Window::from_rows(rows.iter());
    c.bench_function("model_forward_window", |b| b.iter(|| model.rewards(black_box(&window)).unwrap()));

    let sc = Scenario { start: State::new(-2.0, 0.4, 0.0), ..Scenario::default() };
    c.bench_function("episode_tick_learned", |b| {
        b.iter_batched(
            || EpisodeRunner::new(&sc, Some(&model), Selector::Model).unwrap(),
            |mut r| {
                for _ in 0..20 {
                    r.step(Input::new(0.5, 0.0), None).unwrap();
                }
                r
            },
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_flow_and_filter, bench_qp, bench_model);
criterion_main!(benches);

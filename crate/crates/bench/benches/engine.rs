//! Microbenchmarks for the hot paths: credit assignment, advantage
//! estimation, and tree construction against the synthetic world.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragproxy_core::credit::assign_credit;
use ragproxy_core::ppo::{gae, ToySoftmaxPolicy};
use ragproxy_core::rollout::{build_tree, synthetic_random_tree, RolloutConfig};
use ragproxy_core::simenv::{generate_world, make_backends, WorldConfig};

fn bench_assign_credit(c: &mut Criterion) {
    let mut group = c.benchmark_group("assign_credit");
    for (label, max_children, max_depth) in [("small", 2, 4), ("medium", 3, 6), ("large", 4, 7)] {
        let tree = synthetic_random_tree(17, max_children, max_depth);
        group.bench_with_input(
            BenchmarkId::new("nodes", format!("{label}-{}", tree.nodes.len())),
            &tree,
            |b, tree| b.iter(|| black_box(assign_credit(black_box(tree)))),
        );
    }
    group.finish();
}

fn bench_gae(c: &mut Criterion) {
    let mut group = c.benchmark_group("gae");
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for len in [16usize, 256, 4096] {
        let deltas: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(len), &deltas, |b, d| {
            b.iter(|| black_box(gae(black_box(d), 0.99, 0.95)))
        });
    }
    group.finish();
}

fn bench_build_tree(c: &mut Criterion) {
    let world = generate_world(&WorldConfig::default());
    let env = make_backends(&world);
    let policy = ToySoftmaxPolicy::default();
    let cfg = RolloutConfig {
        max_depth: 7,
        ..RolloutConfig::default()
    };
    let question = world.questions[0].question.clone();
    c.bench_function("build_tree", |b| {
        b.iter(|| {
            black_box(build_tree(black_box(&question), &policy, &env, &cfg).unwrap())
        })
    });
}

criterion_group!(benches, bench_assign_credit, bench_gae, bench_build_tree);
criterion_main!(benches);

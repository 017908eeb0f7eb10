use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ued_core::env::{build_pomdp, Action};
use ued_core::nn::{adam_next, AdamConfig, Graph, Params};
use ued_core::ppo::{collect_rollout, compute_gae, update_student, PpoConfig, StudentConfig, StudentPolicy};
use ued_core::task::{random_task, TaskSpaceConfig};
use ued_core::vae::{TaskVae, VaeConfig};

fn env_step(c: &mut Criterion) {
    let space = TaskSpaceConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let env = build_pomdp(&random_task(&mut rng, &space), &space).unwrap();
    c.bench_function("env_step_x100", |b| {
        b.iter_batched(
            || env.reset().0,
            |mut state| {
                for i in 0..100 {
                    let (obs, _, done) = env.step(&mut state, Action::from_index(i % 3)).unwrap();
                    black_box(obs);
                    if done {
                        state = env.reset().0;
                    }
                }
            },
            BatchSize::SmallInput,
        )
    });
}

fn gae(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 256;
    let rewards: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.05)).collect();
    c.bench_function("gae_256", |b| {
        b.iter(|| compute_gae(black_box(&rewards), &values, &dones, 0.3, 0.995, 0.95).unwrap())
    });
}

fn vae_train_step(c: &mut Criterion) {
    let space = TaskSpaceConfig::desk();
    let cfg = VaeConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vae = TaskVae::new(cfg.clone(), space, &mut rng).unwrap();
    let tasks: Vec<_> = (0..cfg.batch).map(|_| random_task(&mut rng, &space)).collect();
    let tokens = vae.tokenize_batch(&tasks).unwrap();
    let adam = AdamConfig::new(cfg.lr, cfg.adam_eps);
    c.bench_function("vae_train_step_b32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (total, _, _) = vae
                .elbo_graph(&mut g, Params::new(&vae.params), &tokens, Some(&mut rng), true)
                .unwrap();
            g.backward(total).unwrap();
            g.accumulate(0, &mut vae.params);
            adam_next(&mut vae.params, &adam).unwrap();
        })
    });
}

fn student(c: &mut Criterion) {
    let space = TaskSpaceConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (policy, mut tree) = StudentPolicy::init(&StudentConfig::desk(), &mut rng).unwrap();
    let envs: Vec<_> = (0..4)
        .map(|_| build_pomdp(&random_task(&mut rng, &space), &space).unwrap())
        .collect();
    let mut group = c.benchmark_group("student");
    group.sample_size(10);
    group.bench_function("rollout_4x256", |b| {
        b.iter(|| collect_rollout(&policy, &tree, &envs, 256, &mut rng).unwrap())
    });
    let trajs = collect_rollout(&policy, &tree, &envs, 256, &mut rng).unwrap();
    let cfg = PpoConfig::desk();
    group.bench_function("ppo_update_4x256", |b| {
        b.iter(|| update_student(&policy, &mut tree, &trajs, &cfg, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, env_step, gae, vae_train_step, student);
criterion_main!(benches);

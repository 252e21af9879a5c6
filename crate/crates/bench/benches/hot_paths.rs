use std::hint::black_box;

use amjl_bench::{models, sinusoid_data};
use amjl_core::env::{horizon_for, run_episode, terminal_reward, ActionMode, RewardConfig};
use amjl_core::imputer::{loss_unsupervised, ImputerLossConfig};
use amjl_core::missingness::{encode_state, MissingState};
use amjl_core::nn::DropoutMode;
use amjl_core::policy::{policy_gradient, GradientConfig};
use amjl_core::seeding::stream;
use criterion::{criterion_group, criterion_main, Criterion};

fn network(c: &mut Criterion) {
    let (policy, _) = models(144, true);
    let state = MissingState::empty(144);
    let x = encode_state(&state);
    let actor = policy.actor();
    let mut rng = stream(0, &[]);
    c.bench_function("actor_forward_144", |b| {
        b.iter(|| actor.forward(black_box(&x), DropoutMode::Train, &mut rng).unwrap())
    });
    let (_, tape) = actor.forward(&x, DropoutMode::Train, &mut rng).unwrap();
    let upstream = vec![0.01; 144];
    c.bench_function("actor_backward_144", |b| b.iter(|| actor.backward(&tape, black_box(&upstream)).unwrap()));
}

fn episodes(c: &mut Criterion) {
    let (policy, imputer) = models(100, false);
    let source: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin()).collect();
    let horizon = horizon_for(100, 0.9);
    let mut rng = stream(1, &[]);
    c.bench_function("run_episode_explore_d100_t10", |b| {
        b.iter(|| run_episode(&policy, black_box(&source), horizon, ActionMode::Explore(0.1), DropoutMode::Train, &mut rng).unwrap())
    });
    let ep = run_episode(&policy, &source, horizon, ActionMode::Stochastic, DropoutMode::Train, &mut rng).unwrap();
    c.bench_function("terminal_reward_k3_d100", |b| {
        b.iter(|| terminal_reward(&imputer, black_box(&ep), &RewardConfig { k: 3 }, &mut rng).unwrap())
    });
    let batch: Vec<_> = (0..16)
        .map(|_| run_episode(&policy, &source, horizon, ActionMode::Explore(0.1), DropoutMode::Train, &mut rng).unwrap())
        .collect();
    let rewards = vec![-0.2; 16];
    c.bench_function("policy_gradient_16_episodes", |b| {
        b.iter(|| policy_gradient(&policy, black_box(&batch), &rewards, &GradientConfig::default()).unwrap())
    });
}

fn imputation(c: &mut Criterion) {
    let (_, imputer) = models(100, false);
    let data = sinusoid_data(64, 0.9);
    let mut rng = stream(2, &[]);
    let state = data.get(0).clone();
    c.bench_function("impute_sample_d100", |b| b.iter(|| imputer.impute_sample(black_box(&state), &mut rng).unwrap()));
    let cfg = ImputerLossConfig::default();
    c.bench_function("loss_unsupervised_batch64", |b| {
        b.iter(|| loss_unsupervised(&imputer, black_box(data.examples()), &cfg, &mut rng).unwrap())
    });
}

criterion_group!(benches, network, episodes, imputation);
criterion_main!(benches);

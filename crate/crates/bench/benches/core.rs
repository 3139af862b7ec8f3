use criterion::{criterion_group, criterion_main, Criterion};
use hzdlab_core::control::FiniteTimeParams;
use hzdlab_core::gait::{periodic_state, rabbit_seed, GaitSearchOptions};
use hzdlab_core::learn::{ddpg_update, Agent, DdpgConfig, ReplayBuffer, Transition};
use hzdlab_core::model::{constrained_accel, impact_map, RobotParams, Vec4};
use hzdlab_core::sim::{simulate_step, IoController, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn dynamics(c: &mut Criterion) {
    let p = RobotParams::default();
    let g = rabbit_seed(&p);
    let (x, _, _) = periodic_state(&p, &g, &GaitSearchOptions::default()).unwrap();
    let u = Vec4::new(10.0, -5.0, 3.0, 1.0);
    c.bench_function("constrained_accel", |b| b.iter(|| constrained_accel(black_box(&p), black_box(&x), &u).unwrap()));
    let (_, pre) = {
        let mut ctrl = IoController::new(p, g.clone(), FiniteTimeParams::default());
        let (log, _) = simulate_step(&mut ctrl, &p, &g, &x, &SimConfig::default()).unwrap();
        (0, log.impacts[0].pre)
    };
    c.bench_function("impact_map", |b| b.iter(|| impact_map(black_box(&p), black_box(&pre)).unwrap()));
}

fn step(c: &mut Criterion) {
    let p = RobotParams::default();
    let g = rabbit_seed(&p);
    let (x, _, _) = periodic_state(&p, &g, &GaitSearchOptions::default()).unwrap();
    let cfg = SimConfig::default();
    let mut group = c.benchmark_group("walk");
    group.sample_size(20);
    group.bench_function("one_step_io", |b| {
        b.iter(|| {
            let mut ctrl = IoController::new(p, g.clone(), FiniteTimeParams::default());
            simulate_step(&mut ctrl, &p, &g, black_box(&x), &cfg).unwrap()
        })
    });
    group.finish();
}

fn ddpg(c: &mut Criterion) {
    let cfg = DdpgConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = Agent::new(&cfg, &mut rng);
    let mut buf = ReplayBuffer::new(4096);
    for i in 0..4096 {
        let s = i as f64 * 1e-3;
        buf.push(Transition { x: [s; 14], action: [0.1; 20], reward: -s, x_next: [s + 1e-3; 14], done: false });
    }
    let mut group = c.benchmark_group("ddpg");
    group.sample_size(20);
    group.bench_function("update_batch_128", |b| {
        b.iter(|| {
            let batch = buf.sample(cfg.batch_size, &mut rng);
            ddpg_update(&mut agent, &batch, &cfg)
        })
    });
    group.finish();
}

criterion_group!(benches, dynamics, step, ddpg);
criterion_main!(benches);

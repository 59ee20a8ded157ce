use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use flowda_core::dynamics::{generate_dataset, make_background, rk4_step, DynamicsConfig};
use flowda_core::flow::{euler_assimilate, Arch, FlowConfig, TrainSample, VelocityModel};
use flowda_core::obs::{sample_observations, SampleMode};
use flowda_core::setconv::{lift, Kernel, DEFAULT_WINDOW};

fn setup() -> (flowda_core::dynamics::Trajectory, VelocityModel) {
    let traj = generate_dataset(&DynamicsConfig::default(), 200, 64, 1).unwrap();
    let mut model = VelocityModel::new(
        Arch::default(),
        traj.config.h,
        traj.config.w,
        traj.config.variable_names(),
        traj.stats().clone(),
        0,
    )
    .unwrap();
    // A non-zero head so the forward pass is not short-circuited by zeros.
    for p in model.params_mut().iter_mut().rev().take(200) {
        *p = 0.01;
    }
    (traj, model)
}

fn dynamics(c: &mut Criterion) {
    let ring = DynamicsConfig::default();
    let x = generate_dataset(&ring, 100, 10, 3).unwrap().states[0].clone();
    c.bench_function("rk4_step ring 40", |b| {
        b.iter(|| rk4_step(black_box(&x), &ring).unwrap())
    });
    let torus = DynamicsConfig::torus(8, 40);
    let y = generate_dataset(&torus, 50, 10, 3).unwrap().states[0].clone();
    c.bench_function("rk4_step torus 8x40", |b| {
        b.iter(|| rk4_step(black_box(&y), &torus).unwrap())
    });
}

fn lifting(c: &mut Criterion) {
    let (traj, model) = setup();
    let obs = sample_observations(&traj.states[10], 0.2, SampleMode::Fresh, 5)
        .unwrap()
        .populate_local_rates(DEFAULT_WINDOW, 1, 40)
        .unwrap();
    let kernel = Kernel::Gaussian { lh: 1.0, lw: 1.0 };
    c.bench_function("gaussian lift alpha 0.2", |b| {
        b.iter(|| lift(black_box(&obs), 1, 40, &kernel, Some(DEFAULT_WINDOW), &[0.0]).unwrap())
    });
    c.bench_function("learned lift alpha 0.2", |b| {
        b.iter(|| model.lift(black_box(&obs)).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let (traj, model) = setup();
    let t = 20;
    let x_b = make_background(&traj, t, 8, 0.05, 7).unwrap();
    let obs = sample_observations(&traj.states[t], 0.2, SampleMode::Fresh, 5).unwrap();
    let lifted = model.lift(&obs).unwrap();
    c.bench_function("velocity forward", |b| {
        b.iter(|| model.velocity(black_box(&x_b), &lifted, 0.5).unwrap())
    });
    let batch: Vec<TrainSample> = (0..8)
        .map(|i| TrainSample {
            x_b: x_b.clone(),
            x_g: traj.states[t].clone(),
            obs: obs.clone(),
            tau: i as f64 / 8.0,
        })
        .collect();
    c.bench_function("loss and gradient, batch 8", |b| {
        b.iter(|| model.loss_and_grad(black_box(&batch)).unwrap())
    });
    let flow = FlowConfig::default();
    c.bench_function("euler assimilate L=32", |b| {
        b.iter_batched(
            || x_b.clone(),
            |x| euler_assimilate(&model, &x, &obs, &flow).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, dynamics, lifting, network);
criterion_main!(benches);

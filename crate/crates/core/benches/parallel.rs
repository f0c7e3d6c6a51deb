//! Parallel versus sequential evaluation of the per-sample kinematics.
//!
//! `par_map` fans out over rayon when the `parallel` feature is on (the
//! default); `seq_map` is the plain iterator baseline. Build with
//! `--no-default-features` to benchmark the sequential fallback end to end.

use std::hint::black_box;

use carryplan::constraints::ObstacleSet;
use carryplan::kinematics::{KinState, RobotModel};
use carryplan::par;
use carryplan::trajectory::{integrate, Trajectory};
use carryplan::verify::{audit, AuditLimits};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn sample_trajectory(horizon: usize) -> Trajectory {
    let n = 6;
    let start = KinState {
        q: vec![0.6, -0.5, 1.8, -2.87, -1.57, 0.0],
        qd: vec![0.0; n],
        qdd: vec![0.0; n],
    };
    let accelerations: Vec<Vec<f64>> = (0..=horizon)
        .map(|t| {
            let phase = t as f64 / horizon as f64 * std::f64::consts::TAU;
            (0..n).map(|i| 3.0 * (phase + i as f64).sin()).collect()
        })
        .collect();
    integrate(&start, &accelerations, 0.032).expect("feasible by construction")
}

fn kinematics(c: &mut Criterion) {
    let model = RobotModel::ur5();
    let dense = sample_trajectory(60).dense_resample(8).unwrap();
    let states = &dense.waypoints;
    let mut group = c.benchmark_group("gravito_inertial_accel");
    group.bench_with_input(BenchmarkId::new("par_map", states.len()), states, |b, s| {
        b.iter(|| par::map(black_box(s), |w| model.gravito_inertial_accel(w).unwrap()))
    });
    group.bench_with_input(BenchmarkId::new("seq_map", states.len()), states, |b, s| {
        b.iter(|| {
            black_box(s)
                .iter()
                .map(|w| model.gravito_inertial_accel(w).unwrap())
                .collect::<Vec<_>>()
        })
    });
    group.finish();
}

fn full_audit(c: &mut Criterion) {
    let model = RobotModel::ur5();
    let traj = sample_trajectory(60);
    let limits = AuditLimits {
        theta_max: Some(45f64.to_radians()),
        a_max: Some(19.74),
        obstacles: ObstacleSet::default(),
        substeps: 16,
    };
    let label = if par::is_parallel() { "parallel" } else { "sequential" };
    c.bench_function(&format!("audit/{label}"), |b| {
        b.iter(|| audit(&model, black_box(&traj), &limits).unwrap())
    });
}

criterion_group!(benches, kinematics, full_audit);
criterion_main!(benches);

//! Property tests for the kinematics, trajectory, geometry, QP and audit
//! invariants.

use carryplan::constraints::{Aabb, ObstacleSet};
use carryplan::kinematics::{KinState, RobotModel};
use carryplan::qp::{self, kkt_residuals, CscMatrix, QpProblem, QpSettings, QpStatus};
use carryplan::trajectory::{integrate, Trajectory};
use carryplan::verify::{audit, AuditLimits};
use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn joints(range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, 6)
}

/// Feasible trajectory from a random start and random step accelerations.
fn trajectory() -> impl Strategy<Value = Trajectory> {
    (joints(3.0), joints(1.5), 2usize..6).prop_flat_map(|(q, qd, horizon)| {
        prop::collection::vec(joints(6.0), horizon + 1).prop_map(move |accels| {
            let start = KinState::new(q.clone(), qd.clone(), accels[0].clone());
            integrate(&start, &accels, 0.032).unwrap()
        })
    })
}

fn dense_csc(d: &DMatrix<f64>) -> CscMatrix {
    let mut t = Vec::new();
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            t.push((i, j, d[(i, j)]));
        }
    }
    CscMatrix::from_triplets(d.nrows(), d.ncols(), &t).unwrap()
}

fn random_qp(seed: u64, cost_scale: f64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=12);
    let m = rng.random_range(1..=12);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = (&g * g.transpose() + DMatrix::identity(n, n)) * cost_scale;
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let l = (0..m).map(|_| rng.random_range(-1.0..-0.1)).collect();
    let u = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let q = (0..n).map(|_| rng.random_range(-5.0..5.0) * cost_scale).collect();
    QpProblem::new(dense_csc(&p), q, dense_csc(&a), l, u).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rne_is_affine_in_joint_acceleration(
        q in joints(3.0), qd in joints(2.0), a1 in joints(5.0), a2 in joints(5.0),
        alpha in -2.0..2.0f64, beta in -2.0..2.0f64,
    ) {
        let model = RobotModel::ur5();
        let eval = |qdd: Vec<f64>| model.rne_forward(&KinState::new(q.clone(), qd.clone(), qdd)).unwrap();
        let mixed: Vec<f64> = (0..6).map(|i| alpha * a1[i] + beta * a2[i]).collect();
        let lhs = eval(mixed);
        let rhs = alpha * eval(a1.clone()) + beta * eval(a2.clone()) + (1.0 - alpha - beta) * eval(vec![0.0; 6]);
        prop_assert!((lhs - rhs).norm() <= 1e-9 * (1.0 + rhs.norm()), "{lhs} vs {rhs}");
    }

    #[test]
    fn grasp_normal_is_unit(q in joints(6.0)) {
        let n = RobotModel::ur5().grasp_normal(&q).unwrap();
        prop_assert!((n.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn position_jacobian_matches_central_differences(q in joints(3.0)) {
        let model = RobotModel::ur5();
        let jac = model.position_jacobian(&q).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (model.forward_kinematics(&plus).unwrap().translation.vector
                - model.forward_kinematics(&minus).unwrap().translation.vector)
                / (2.0 * h);
            prop_assert!((fd - jac.column(i)).amax() <= 1e-6);
        }
    }

    #[test]
    fn resampling_refines_consistently(traj in trajectory(), m in 1usize..4, m2 in 1usize..4) {
        let twice = traj.dense_resample(m).unwrap().dense_resample(m2).unwrap();
        let once = traj.dense_resample(m * m2).unwrap();
        prop_assert_eq!(twice.waypoints.len(), once.waypoints.len());
        for (a, b) in twice.waypoints.iter().zip(&once.waypoints) {
            for (x, y) in a.to_stacked().iter().zip(b.to_stacked()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn reversed_trajectory_is_feasible(traj in trajectory()) {
        let reversed: Vec<KinState> = traj
            .waypoints
            .iter()
            .rev()
            .map(|w| KinState::new(w.q.clone(), w.qd.iter().map(|v| -v).collect(), w.qdd.clone()))
            .collect();
        let back = Trajectory::new(traj.t_step, reversed).unwrap();
        prop_assert!(back.max_dynamics_residual() <= 1e-9);
    }

    #[test]
    fn box_distance_is_translation_invariant(
        corner in prop::array::uniform3(-1.0..1.0f64),
        size in prop::array::uniform3(0.01..1.0f64),
        point in prop::array::uniform3(-2.0..2.0f64),
        shift in prop::array::uniform3(-3.0..3.0f64),
    ) {
        let max = [corner[0] + size[0], corner[1] + size[1], corner[2] + size[2]];
        let here = Aabb::new(corner, max);
        let moved = Aabb::new(
            [corner[0] + shift[0], corner[1] + shift[1], corner[2] + shift[2]],
            [max[0] + shift[0], max[1] + shift[1], max[2] + shift[2]],
        );
        let p = Vector3::from(point);
        let (d0, n0) = here.signed_distance(&p);
        let (d1, n1) = moved.signed_distance(&(p + Vector3::from(shift)));
        prop_assert!((d0 - d1).abs() <= 1e-12, "{d0} vs {d1}");
        prop_assert!((n0 - n1).amax() <= 1e-9);
    }

    #[test]
    fn solved_qps_pass_independent_kkt_check(seed in any::<u64>()) {
        let prob = random_qp(seed, 1.0);
        let settings = QpSettings::default();
        let sol = qp::solve(&prob, &settings, None).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Solved);
        let kkt = kkt_residuals(&prob, &sol.x, &sol.y);
        prop_assert!(kkt.within(settings.eps_abs, settings.eps_rel), "{:?}", kkt);
    }

    #[test]
    fn scaling_the_cost_leaves_the_minimizer(seed in any::<u64>(), c in 0.1..10.0f64) {
        let settings = QpSettings { eps_abs: 1e-11, eps_rel: 1e-11, ..QpSettings::default() };
        let base = qp::solve(&random_qp(seed, 1.0), &settings, None).unwrap();
        let scaled = qp::solve(&random_qp(seed, c), &settings, None).unwrap();
        for (a, b) in base.x.iter().zip(&scaled.x) {
            prop_assert!((a - b).abs() <= 1e-8, "{:?} vs {:?}", base.x, scaled.x);
        }
    }

    #[test]
    fn audit_integrals_are_nonnegative(traj in trajectory(), cap in 9.9..40.0f64) {
        let limits = AuditLimits {
            theta_max: Some(0.5),
            a_max: Some(cap),
            obstacles: ObstacleSet::default(),
            substeps: 8,
        };
        let report = audit(&RobotModel::ur5(), &traj, &limits).unwrap();
        let ive = report.ive.unwrap();
        prop_assert!(report.ie >= 0.0 && ive >= 0.0);
        if report.max_magnitude <= cap {
            prop_assert_eq!(ive, 0.0);
        }
    }
}

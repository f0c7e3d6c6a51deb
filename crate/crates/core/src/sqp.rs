//! Trust-region sequential quadratic programming over a fixed horizon.
//!
//! Each outer iteration linearizes the non-convex constraints (endpoint
//! poses, obstacle clearance, acceleration cone and cap) about the current
//! iterate, adds one non-negative slack per linearized row with an L1
//! penalty, bounds the change of every waypoint configuration by the trust
//! radius, and solves the resulting QP. Steps are accepted on the ratio of
//! true to predicted merit decrease. Penalties grow per constraint group
//! until the true violations fall below tolerance.

use std::path::PathBuf;

use nalgebra::IsometryMatrix3;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    convex_rows, endpoint_residual, linearize, obstacle_residuals_in, ConstraintProfile,
    ConvexOptions, LinearizedConstraint, ObstacleSet, SamplePoint, SlackGroup, DEFAULT_FD_STEP,
    DEGENERATE_ACCEL,
};
use crate::error::{Error, Result};
use crate::kinematics::{KinState, RobotModel};
use crate::par;
use crate::qp::{self, CscMatrix, LdlFactor, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::trajectory::{Layout, Trajectory};

/// Penalized constraint groups, in the order used for per-group penalties.
pub const PENALTY_GROUPS: [SlackGroup; 4] = [
    SlackGroup::Endpoint,
    SlackGroup::Obstacle,
    SlackGroup::Alignment,
    SlackGroup::Magnitude,
];

fn group_index(g: SlackGroup) -> usize {
    match g {
        SlackGroup::Endpoint => 0,
        SlackGroup::Obstacle => 1,
        SlackGroup::Alignment => 2,
        SlackGroup::Magnitude => 3,
        SlackGroup::Hard => unreachable!("hard rows carry no slack"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpConfig {
    /// Initial bound on the per-iteration change of each joint position (rad).
    pub trust_radius: f64,
    pub trust_expand: f64,
    pub trust_shrink: f64,
    pub trust_min: f64,
    /// Ceiling for the expanded trust radius (rad).
    pub trust_max: f64,
    /// Initial L1 penalty on slack variables.
    pub penalty: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Budget of QP subproblems per solve.
    pub max_iterations: usize,
    /// Tolerance on true constraint violations.
    pub eps_cons: f64,
    /// Per-joint jerk weights, base to wrist.
    pub weights: Vec<f64>,
    /// Factor applied to the smoothness objective inside the merit function.
    pub objective_scale: f64,
    /// Accepted steps smaller than this (rad, inf-norm) end the solve once
    /// the iterate is feasible.
    pub step_tol: f64,
    /// Minimum ratio of actual to predicted merit decrease to accept a step.
    pub accept_ratio: f64,
    /// Predicted decrease below this fraction of the merit counts as
    /// converged for the current penalties.
    pub improve_tol: f64,
    /// Obstacle pairs farther apart than this (m) are not linearized.
    pub obstacle_activation: f64,
    /// Constraint samples per step (waypoints plus interior points).
    pub check_substeps: usize,
    /// Relative tightening of box and jerk limits inside the subproblems.
    pub limit_margin: f64,
    pub fd_step: f64,
    pub qp: QpSettings,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            trust_radius: 0.1,
            trust_expand: 1.5,
            trust_shrink: 0.5,
            trust_min: 1e-4,
            trust_max: 1.0,
            penalty: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e6,
            max_iterations: 100,
            eps_cons: 1e-4,
            weights: vec![8.0, 7.0, 6.0, 3.0, 2.0, 1.0],
            objective_scale: 1e-5,
            step_tol: 1e-4,
            accept_ratio: 0.25,
            improve_tol: 1e-6,
            obstacle_activation: 0.15,
            check_substeps: 2,
            limit_margin: 1e-4,
            fd_step: DEFAULT_FD_STEP,
            qp: QpSettings::default(),
        }
    }
}

impl SqpConfig {
    pub fn validate(&self, dof: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidProblem(format!("SQP config: {m}")));
        if !(self.trust_expand > 1.0 && self.trust_shrink > 0.0 && self.trust_shrink < 1.0) {
            return bad("need expand > 1 > shrink > 0");
        }
        if !(self.trust_radius > 0.0 && self.trust_min > 0.0 && self.trust_max >= self.trust_radius) {
            return bad("trust radii must be positive with max >= initial");
        }
        if !(self.penalty > 0.0 && self.penalty_growth > 1.0 && self.penalty_max >= self.penalty) {
            return bad("need penalty > 0, growth > 1, max >= initial");
        }
        if self.weights.len() != dof {
            return bad(&format!("expected {dof} jerk weights, got {}", self.weights.len()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return bad("jerk weights must be positive");
        }
        if !(self.eps_cons > 0.0 && self.objective_scale > 0.0 && self.fd_step > 0.0) {
            return bad("tolerances and scales must be positive");
        }
        if self.check_substeps == 0 {
            return bad("check_substeps must be >= 1");
        }
        if !(0.0..0.5).contains(&self.limit_margin) {
            return bad("limit_margin must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// Smoothness objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Weighted sum of squared acceleration differences over the step.
    Jerk,
    /// Unweighted sum of squared joint accelerations.
    Acceleration,
}

/// Everything the optimizer needs besides the horizon and initial guess.
#[derive(Debug, Clone)]
pub struct TransportTask {
    pub model: RobotModel,
    pub obstacles: ObstacleSet,
    pub pick: IsometryMatrix3<f64>,
    pub place: IsometryMatrix3<f64>,
    pub profile: ConstraintProfile,
    pub objective: ObjectiveKind,
    pub jerk_limits: bool,
    pub t_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub trust_radius: f64,
    pub accepted: bool,
    pub merit: f64,
    pub penalty: [f64; 4],
}

/// A recorded subproblem, for auditing and debugging.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub problem: QpProblem,
    pub solution: QpSolution,
}

/// Which subproblems to keep.
#[derive(Debug, Clone, Default)]
pub struct Recording {
    /// Keep every k-th subproblem in memory (0 disables).
    pub keep_every: usize,
    /// Write every subproblem as Matrix-Market files here.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub trajectory: Trajectory,
    pub converged: bool,
    pub max_violation: f64,
    /// Unscaled smoothness objective of the returned trajectory.
    pub objective: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub subproblems: Vec<Subproblem>,
    /// Acceleration samples skipped because the alignment direction was
    /// undefined.
    pub degenerate_samples: usize,
}

/// Quadratic form of the smoothness objective over the stacked decision
/// vector: `x' P x` equals the objective. `p` is zero.
pub fn objective_matrix(
    horizon: usize,
    dof: usize,
    t_step: f64,
    weights: &[f64],
    kind: ObjectiveKind,
) -> Result<(CscMatrix, Vec<f64>)> {
    if horizon < 1 {
        return Err(Error::InvalidProblem("horizon must be >= 1".into()));
    }
    crate::error::check_len("jerk weights", dof, weights.len())?;
    let layout = Layout::new(dof, horizon);
    let mut t = Vec::new();
    match kind {
        ObjectiveKind::Jerk => {
            let inv = 1.0 / (t_step * t_step);
            for s in 0..horizon {
                for (i, &w) in weights.iter().enumerate() {
                    let a = layout.qdd(s, i);
                    let b = layout.qdd(s + 1, i);
                    let c = w * inv;
                    t.extend([(a, a, c), (b, b, c), (a, b, -c), (b, a, -c)]);
                }
            }
        }
        ObjectiveKind::Acceleration => {
            for s in 0..=horizon {
                for i in 0..dof {
                    let a = layout.qdd(s, i);
                    t.push((a, a, 1.0));
                }
            }
        }
    }
    let p = CscMatrix::from_triplets(layout.len(), layout.len(), &t)?;
    Ok((p, vec![0.0; layout.len()]))
}

/// Straight-line joint interpolation through `seeds`, parameterized by
/// joint-space arc length, with velocities and accelerations from finite
/// differences clamped to the limits. Not dynamically consistent; the
/// optimizer projects it before use.
pub fn initial_guess(model: &RobotModel, seeds: &[Vec<f64>], horizon: usize, t_step: f64) -> Result<Trajectory> {
    let n = model.dof();
    if seeds.len() < 2 {
        return Err(Error::InvalidTrajectory("need at least two seeds".into()));
    }
    for s in seeds {
        crate::error::check_len("seed", n, s.len())?;
    }
    let mut cumulative = vec![0.0];
    for w in seeds.windows(2) {
        let d: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        cumulative.push(cumulative.last().unwrap() + d);
    }
    let total = *cumulative.last().unwrap();
    let q_at = |frac: f64| -> Vec<f64> {
        if total == 0.0 {
            return seeds[0].clone();
        }
        let target = frac * total;
        let k = cumulative
            .windows(2)
            .position(|c| target <= c[1])
            .unwrap_or(seeds.len() - 2);
        let span = cumulative[k + 1] - cumulative[k];
        let s = if span > 0.0 { (target - cumulative[k]) / span } else { 0.0 };
        seeds[k].iter().zip(&seeds[k + 1]).map(|(a, b)| a + s * (b - a)).collect()
    };
    let qs: Vec<Vec<f64>> = (0..=horizon).map(|t| q_at(t as f64 / horizon as f64)).collect();
    let lim = &model.limits;
    let mut waypoints = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut qd = vec![0.0; n];
        let mut qdd = vec![0.0; n];
        if t > 0 && t < horizon {
            for i in 0..n {
                qd[i] = ((qs[t + 1][i] - qs[t - 1][i]) / (2.0 * t_step)).clamp(-lim.velocity[i], lim.velocity[i]);
                qdd[i] = ((qs[t + 1][i] - 2.0 * qs[t][i] + qs[t - 1][i]) / (t_step * t_step))
                    .clamp(-lim.acceleration[i], lim.acceleration[i]);
            }
        }
        let q = qs[t]
            .iter()
            .enumerate()
            .map(|(i, v)| v.clamp(lim.position_lower[i], lim.position_upper[i]))
            .collect();
        waypoints.push(KinState::new(q, qd, qdd));
    }
    Trajectory::new(t_step, waypoints)
}

/// True constraint violations at an iterate, summed per penalty group.
#[derive(Debug, Clone, PartialEq)]
struct Violations {
    sums: [f64; 4],
    maxes: [f64; 4],
    /// Largest violation of the exact convex rows (unmargined limits).
    convex: f64,
    degenerate: usize,
}

impl Violations {
    fn max(&self) -> f64 {
        self.maxes.iter().copied().fold(self.convex, f64::max)
    }
}

/// Per-sample evaluation output.
struct SampleEval {
    rows: Vec<LinearizedConstraint>,
    sums: [f64; 4],
    maxes: [f64; 4],
    degenerate: usize,
}

struct Solver<'a> {
    task: &'a TransportTask,
    config: &'a SqpConfig,
    layout: Layout,
    samples: Vec<SamplePoint>,
    p_obj: CscMatrix,
    /// Exact convex rows (unmargined) for violation checks.
    exact_rows: Vec<LinearizedConstraint>,
    /// Convex rows with margins applied, trust region not yet applied.
    qp_rows: Vec<LinearizedConstraint>,
    /// Indices of position box rows in `qp_rows`, by stacked variable.
    q_box_rows: Vec<(usize, usize)>,
    projector: EqualityProjector,
}

impl<'a> Solver<'a> {
    fn new(task: &'a TransportTask, horizon: usize, config: &'a SqpConfig) -> Result<Self> {
        let n = task.model.dof();
        let layout = Layout::new(n, horizon);
        let (p_obj, _) = objective_matrix(horizon, n, task.t_step, &config.weights, task.objective)?;
        let options = ConvexOptions {
            jerk_limits: task.jerk_limits,
        };
        let exact_rows = convex_rows(layout, task.t_step, &task.model.limits, options);
        let qp_rows: Vec<LinearizedConstraint> = exact_rows
            .iter()
            .map(|r| tighten(r, config.limit_margin))
            .collect();
        let mut q_box_rows = Vec::new();
        for (k, r) in qp_rows.iter().enumerate() {
            if r.label.starts_with("q[") {
                q_box_rows.push((k, r.coeffs[0].0));
            }
        }
        let projector = EqualityProjector::new(&exact_rows, layout.len())?;
        Ok(Self {
            task,
            config,
            layout,
            samples: SamplePoint::grid(horizon, task.t_step, config.check_substeps),
            p_obj,
            exact_rows,
            qp_rows,
            q_box_rows,
            projector,
        })
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p_obj.mul_vec(x);
        x.iter().zip(&px).map(|(a, b)| a * b).sum()
    }

    fn merit(&self, x: &[f64], v: &Violations, penalty: &[f64; 4]) -> f64 {
        self.config.objective_scale * self.objective(x)
            + penalty.iter().zip(&v.sums).map(|(m, s)| m * s).sum::<f64>()
    }

    /// Evaluate true violations and, when `with_rows`, linearize every
    /// non-convex constraint at `x`.
    fn evaluate(&self, x: &[f64], with_rows: bool) -> Result<(Violations, Vec<LinearizedConstraint>)> {
        let task = self.task;
        let cfg = self.config;
        let layout = self.layout;
        let h = task.t_step;
        let profile = &task.profile;
        let accel_on = profile.theta_max.is_some() || profile.a_max.is_some();

        let per_sample = par::map(&self.samples, |point| -> Result<SampleEval> {
            let state = point.state(x, layout, h);
            let mut out = SampleEval {
                rows: Vec::new(),
                sums: [0.0; 4],
                maxes: [0.0; 4],
                degenerate: 0,
            };
            fn add(out: &mut SampleEval, g: usize, viol: f64) {
                out.sums[g] += viol;
                out.maxes[g] = out.maxes[g].max(viol);
            }
            let time_label = format!("t={:.4}", point.time(h));

            if !task.obstacles.is_empty() && !task.model.collision_spheres.is_empty() {
                let frames = task.model.frames(&state.q)?;
                let centers = task.model.sphere_centers(&frames);
                for r in obstacle_residuals_in(&task.model, &frames, &task.obstacles, profile.d_safe) {
                    add(&mut out, 1, (-r.residual).max(0.0));
                    if with_rows && r.residual < cfg.obstacle_activation {
                        let link = task.model.collision_spheres[r.sphere].link;
                        let jac = RobotModel::point_jacobian_in(&frames, link, &centers[r.sphere]);
                        let d_q: Vec<f64> = (0..layout.dof).map(|j| r.normal.dot(&jac.column(j))).collect();
                        let zeros = vec![0.0; layout.dof];
                        let lin = crate::constraints::Linearization {
                            value: r.residual,
                            gradient: point.chain(layout, h, &d_q, &zeros, &zeros),
                        };
                        out.rows.push(lin.lower_row(
                            x,
                            0.0,
                            SlackGroup::Obstacle,
                            format!("obstacle {} sphere {} {time_label}", task.obstacles.label(r.obstacle), r.sphere),
                        ));
                    }
                }
            }

            if accel_on {
                let a = task.model.gravito_inertial_accel(&state)?;
                let align_on = match profile.theta_max {
                    Some(_) if a.norm() <= DEGENERATE_ACCEL => {
                        out.degenerate += 1;
                        false
                    }
                    Some(_) => true,
                    None => false,
                };
                let values = accel_values(&task.model, &state, profile, align_on)?;
                let mut k = 0;
                if align_on {
                    add(&mut out, 2, values[k].max(0.0));
                    k += 1;
                }
                if profile.a_max.is_some() {
                    add(&mut out, 3, values[k].max(0.0));
                }
                if with_rows && (align_on || profile.a_max.is_some()) {
                    let lins = linearize(
                        |s: &KinState| accel_values(&task.model, s, profile, align_on),
                        point,
                        x,
                        layout,
                        h,
                        cfg.fd_step,
                    )?;
                    let mut it = lins.into_iter();
                    if align_on {
                        let lin = it.next().unwrap();
                        out.rows
                            .push(lin.upper_row(x, 0.0, SlackGroup::Alignment, format!("alignment {time_label}")));
                    }
                    if profile.a_max.is_some() {
                        let lin = it.next().unwrap();
                        out.rows
                            .push(lin.upper_row(x, 0.0, SlackGroup::Magnitude, format!("magnitude {time_label}")));
                    }
                }
            }
            Ok(out)
        });

        let mut v = Violations {
            sums: [0.0; 4],
            maxes: [0.0; 4],
            convex: 0.0,
            degenerate: 0,
        };
        let mut rows = Vec::new();
        for s in per_sample {
            let s = s?;
            for g in 0..4 {
                v.sums[g] += s.sums[g];
                v.maxes[g] = v.maxes[g].max(s.maxes[g]);
            }
            v.degenerate += s.degenerate;
            rows.extend(s.rows);
        }

        let mode = profile.endpoint_mode;
        for (t, target, name) in [(0, &task.pick, "pick"), (layout.horizon, &task.place, "place")] {
            let point = SamplePoint::waypoint(t);
            let f = |s: &KinState| endpoint_residual(&task.model, &s.q, target, mode);
            let values = f(&point.state(x, layout, h))?;
            for r in &values {
                v.sums[0] += r.abs();
                v.maxes[0] = v.maxes[0].max(r.abs());
            }
            if with_rows {
                let lins = linearize(f, &point, x, layout, h, cfg.fd_step)?;
                for (k, lin) in lins.into_iter().enumerate() {
                    rows.push(lin.equality_row(x, SlackGroup::Endpoint, format!("{name} endpoint {k}")));
                }
            }
        }

        v.convex = self.exact_rows.iter().map(|r| r.violation(x)).fold(0.0, f64::max);
        Ok((v, rows))
    }

    /// Model merit: quadratic objective plus penalized linearized violations.
    fn model_merit(&self, x: &[f64], rows: &[LinearizedConstraint], penalty: &[f64; 4]) -> f64 {
        let mut m = self.config.objective_scale * self.objective(x);
        for r in rows {
            m += penalty[group_index(r.group)] * r.violation(x);
        }
        m
    }

    fn build_qp(
        &self,
        x: &[f64],
        rows: &[LinearizedConstraint],
        penalty: &[f64; 4],
        trust: f64,
    ) -> Result<(QpProblem, Vec<f64>)> {
        let nx = self.layout.len();
        let slack_count: usize = rows.iter().map(|r| if r.is_equality() { 2 } else { 1 }).sum();
        let nv = nx + slack_count;

        let scale = 2.0 * self.config.objective_scale;
        let mut p_trip = Vec::with_capacity(self.p_obj.nnz());
        for j in 0..nx {
            for (i, v) in self.p_obj.col(j) {
                p_trip.push((i, j, scale * v));
            }
        }
        let p = CscMatrix::from_triplets(nv, nv, &p_trip)?;
        let mut q = vec![0.0; nv];

        let mut a_trip = Vec::new();
        let mut l = Vec::new();
        let mut u = Vec::new();
        let mut row = 0;
        for (k, r) in self.qp_rows.iter().enumerate() {
            let (mut lo, mut hi) = (r.lower, r.upper);
            if let Ok(pos) = self.q_box_rows.binary_search_by_key(&k, |&(rk, _)| rk) {
                let var = self.q_box_rows[pos].1;
                lo = lo.max(x[var] - trust);
                hi = hi.min(x[var] + trust);
                if lo > hi {
                    let c = x[var].clamp(r.lower, r.upper);
                    lo = c;
                    hi = c;
                }
            }
            for &(j, c) in &r.coeffs {
                a_trip.push((row, j, c));
            }
            l.push(lo);
            u.push(hi);
            row += 1;
        }

        let mut warm = x.to_vec();
        warm.resize(nv, 0.0);
        let mut slack = nx;
        let mut slack_rows = Vec::with_capacity(slack_count);
        for r in rows {
            let mu = penalty[group_index(r.group)];
            for &(j, c) in &r.coeffs {
                a_trip.push((row, j, c));
            }
            let value = r.value(x);
            if r.is_equality() {
                a_trip.push((row, slack, -1.0));
                a_trip.push((row, slack + 1, 1.0));
                q[slack] = mu;
                q[slack + 1] = mu;
                warm[slack] = (value - r.upper).max(0.0);
                warm[slack + 1] = (r.lower - value).max(0.0);
                slack_rows.extend([slack, slack + 1]);
                slack += 2;
            } else {
                if r.upper.is_finite() {
                    a_trip.push((row, slack, -1.0));
                    warm[slack] = (value - r.upper).max(0.0);
                } else {
                    a_trip.push((row, slack, 1.0));
                    warm[slack] = (r.lower - value).max(0.0);
                }
                q[slack] = mu;
                slack_rows.push(slack);
                slack += 1;
            }
            l.push(r.lower);
            u.push(r.upper);
            row += 1;
        }
        for s in slack_rows {
            a_trip.push((row, s, 1.0));
            l.push(0.0);
            u.push(f64::INFINITY);
            row += 1;
        }
        let a = CscMatrix::from_triplets(row, nv, &a_trip)?;
        Ok((QpProblem::new(p, q, a, l, u)?, warm))
    }

    /// Project an arbitrary guess onto the margined convex rows, keeping
    /// the end configurations fixed when that is feasible.
    fn project_initial(&self, guess: &[f64]) -> Result<Vec<f64>> {
        let nx = self.layout.len();
        let n = self.layout.dof;
        let settings = QpSettings {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            ..self.config.qp.clone()
        };
        for pin in [true, false] {
            let p = CscMatrix::identity(nx);
            let q: Vec<f64> = guess.iter().map(|v| -v).collect();
            let mut t = Vec::new();
            let mut l = Vec::new();
            let mut u = Vec::new();
            for (k, r) in self.qp_rows.iter().enumerate() {
                for &(j, c) in &r.coeffs {
                    t.push((k, j, c));
                }
                l.push(r.lower);
                u.push(r.upper);
            }
            if pin {
                let mut row = self.qp_rows.len();
                for s in [0, self.layout.horizon] {
                    for i in 0..n {
                        let j = self.layout.q(s, i);
                        t.push((row, j, 1.0));
                        l.push(guess[j]);
                        u.push(guess[j]);
                        row += 1;
                    }
                }
            }
            let a = CscMatrix::from_triplets(l.len(), nx, &t)?;
            let prob = QpProblem::new(p, q, a, l, u)?;
            let sol = qp::solve(&prob, &settings, None)?;
            if sol.status == QpStatus::Solved {
                let mut x = sol.x;
                self.projector.project(&mut x);
                return Ok(x);
            }
        }
        Err(Error::Planning(
            "no trajectory satisfies the joint limits and boundary conditions at this horizon".into(),
        ))
    }
}

fn accel_values(model: &RobotModel, s: &KinState, profile: &ConstraintProfile, align: bool) -> Result<Vec<f64>> {
    let a = model.gravito_inertial_accel(s)?;
    let mut out = Vec::with_capacity(2);
    if align {
        let theta = profile.theta_max.expect("alignment requires theta_max");
        let mag = a.norm();
        if mag <= DEGENERATE_ACCEL {
            return Err(Error::DegenerateAcceleration(mag));
        }
        let n = model.grasp_normal(&s.q)?;
        out.push(theta.cos() - a.dot(&n) / mag);
    }
    if let Some(a_max) = profile.a_max {
        out.push(a.norm() - a_max);
    }
    Ok(out)
}

/// Shrink a two-sided inequality row toward its centre by a relative
/// margin. Equalities and one-sided rows are unchanged.
fn tighten(r: &LinearizedConstraint, margin: f64) -> LinearizedConstraint {
    let mut out = r.clone();
    if !r.is_equality() && r.lower.is_finite() && r.upper.is_finite() {
        let m = margin * 0.5 * (r.upper - r.lower);
        out.lower += m;
        out.upper -= m;
    }
    out
}

/// Orthogonal projection onto the affine set of the hard equality rows
/// (waypoint dynamics and boundary conditions). Removes the small
/// equality residual left by the iterative QP solver.
struct EqualityProjector {
    c: CscMatrix,
    d: Vec<f64>,
    factor: LdlFactor,
}

impl EqualityProjector {
    fn new(rows: &[LinearizedConstraint], nx: usize) -> Result<Self> {
        let eq: Vec<&LinearizedConstraint> = rows.iter().filter(|r| r.is_equality()).collect();
        let mut t = Vec::new();
        for (k, r) in eq.iter().enumerate() {
            for &(j, c) in &r.coeffs {
                t.push((k, j, c));
            }
        }
        let c = CscMatrix::from_triplets(eq.len(), nx, &t)?;
        let d = eq.iter().map(|r| r.lower).collect();
        // C C^T, upper triangle.
        let mut g = Vec::new();
        for j in 0..nx {
            let col: Vec<(usize, f64)> = c.col(j).collect();
            for &(a, va) in &col {
                for &(b, vb) in &col {
                    if a <= b {
                        g.push((a, b, va * vb));
                    }
                }
            }
        }
        let gram = CscMatrix::from_triplets(eq.len(), eq.len(), &g)?;
        let factor = LdlFactor::new(&gram)?;
        Ok(Self { c, d, factor })
    }

    fn project(&self, x: &mut [f64]) {
        let cx = self.c.mul_vec(&x[..self.c.ncols]);
        let mut r: Vec<f64> = cx.iter().zip(&self.d).map(|(a, b)| a - b).collect();
        self.factor.solve_in_place(&mut r);
        let corr = self.c.tr_mul_vec(&r);
        for (xi, ci) in x.iter_mut().zip(corr) {
            *xi -= ci;
        }
    }
}

/// Run the trust-region SQP at a fixed horizon from `initial`.
pub fn sqp_solve(
    task: &TransportTask,
    horizon: usize,
    initial: &Trajectory,
    config: &SqpConfig,
    recording: &Recording,
) -> Result<SqpResult> {
    let n = task.model.dof();
    config.validate(n)?;
    task.profile.validate(task.model.gravity.norm())?;
    task.obstacles.validate()?;
    if horizon < 2 {
        return Err(Error::InvalidProblem("horizon must be >= 2".into()));
    }
    if initial.dof() != n || initial.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            what: "initial trajectory horizon",
            expected: horizon,
            got: initial.horizon(),
        });
    }
    let solver = Solver::new(task, horizon, config)?;
    let layout = solver.layout;
    let nx = layout.len();

    let mut x = solver.project_initial(&initial.to_stacked())?;
    let mut penalty = [config.penalty; 4];
    let mut trust = config.trust_radius;
    let mut trace = Vec::new();
    let mut subproblems = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut warm_y: Option<Vec<f64>> = None;

    let (mut viol, mut rows) = solver.evaluate(&x, true)?;
    let mut merit = solver.merit(&x, &viol, &penalty);

    'penalty: loop {
        // Iterate at fixed penalties until no further model improvement.
        'convexify: loop {
            loop {
                if iterations >= config.max_iterations {
                    break 'penalty;
                }
                iterations += 1;
                let (prob, warm_x) = solver.build_qp(&x, &rows, &penalty, trust)?;
                let warm = warm_y
                    .as_ref()
                    .filter(|y| y.len() == prob.num_rows())
                    .map(|y| (warm_x.as_slice(), y.as_slice()));
                let sol = qp::solve(&prob, &config.qp, warm)?;
                if let Some(dir) = &recording.dump_dir {
                    prob.write_matrix_market(dir, &format!("qp_h{horizon}_{iterations:04}"))?;
                }
                let status = sol.status;
                let mut x_new = sol.x[..nx].to_vec();
                if recording.keep_every > 0 && iterations % recording.keep_every == 0 {
                    subproblems.push(Subproblem {
                        problem: prob,
                        solution: sol.clone(),
                    });
                }
                // An iterate cut off by the iteration cap is still a usable step; the
                // ratio test below rejects it if the model was too inaccurate.
                let usable = match status {
                    QpStatus::Solved => true,
                    QpStatus::MaxIterations => x_new.iter().all(|v| v.is_finite()),
                    QpStatus::PrimalInfeasible => false,
                };
                if !usable {
                    warm_y = None;
                    trust *= config.trust_shrink;
                    trace.push(entry(&solver, iterations, &x, &viol, merit, trust, false, &penalty));
                    if trust < config.trust_min {
                        break 'convexify;
                    }
                    continue;
                }
                warm_y = Some(sol.y);
                solver.projector.project(&mut x_new);

                let model = solver.model_merit(&x_new, &rows, &penalty);
                let predicted = merit - model;
                if predicted < config.improve_tol * merit.abs().max(1.0) {
                    trace.push(entry(&solver, iterations, &x, &viol, merit, trust, false, &penalty));
                    break 'convexify;
                }
                let (viol_new, rows_new) = match solver.evaluate(&x_new, true) {
                    Ok(v) => v,
                    Err(Error::NonFinite(_) | Error::DegenerateAcceleration(_)) => {
                        trust *= config.trust_shrink;
                        trace.push(entry(&solver, iterations, &x, &viol, merit, trust, false, &penalty));
                        if trust < config.trust_min {
                            break 'convexify;
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let merit_new = solver.merit(&x_new, &viol_new, &penalty);
                let ratio = (merit - merit_new) / predicted;
                if ratio > config.accept_ratio {
                    let step = (0..layout.waypoints())
                        .flat_map(|t| (0..n).map(move |i| (t, i)))
                        .map(|(t, i)| (x_new[layout.q(t, i)] - x[layout.q(t, i)]).abs())
                        .fold(0.0, f64::max);
                    x = x_new;
                    viol = viol_new;
                    rows = rows_new;
                    merit = merit_new;
                    trust = (trust * config.trust_expand).min(config.trust_max);
                    trace.push(entry(&solver, iterations, &x, &viol, merit, trust, true, &penalty));
                    if step < config.step_tol && viol.max() <= config.eps_cons {
                        converged = true;
                        break 'penalty;
                    }
                    break;
                }
                trust *= config.trust_shrink;
                trace.push(entry(&solver, iterations, &x, &viol, merit, trust, false, &penalty));
                if trust < config.trust_min {
                    break 'convexify;
                }
            }
        }

        if viol.max() <= config.eps_cons {
            converged = true;
            break;
        }
        let mut raised = false;
        for g in 0..4 {
            if viol.maxes[g] > config.eps_cons && penalty[g] < config.penalty_max {
                penalty[g] = (penalty[g] * config.penalty_growth).min(config.penalty_max);
                raised = true;
            }
        }
        if !raised {
            break;
        }
        trust = trust.max(config.trust_radius);
        merit = solver.merit(&x, &viol, &penalty);
    }

    let trajectory = Trajectory::from_stacked(&x, layout, task.t_step);
    Ok(SqpResult {
        trajectory,
        converged,
        max_violation: viol.max(),
        objective: solver.objective(&x),
        iterations,
        trace,
        subproblems,
        degenerate_samples: viol.degenerate,
    })
}

#[allow(clippy::too_many_arguments)]
fn entry(
    solver: &Solver,
    iter: usize,
    x: &[f64],
    viol: &Violations,
    merit: f64,
    trust: f64,
    accepted: bool,
    penalty: &[f64; 4],
) -> TraceEntry {
    TraceEntry {
        iter,
        objective: solver.objective(x),
        max_violation: viol.max(),
        trust_radius: trust,
        accepted,
        merit,
        penalty: *penalty,
    }
}

//! Time minimization by shrinking the horizon.
//!
//! A plan starts at the longest horizon, then repeatedly drops one step and
//! re-solves from a time-rescaled copy of the last converged trajectory
//! until a solve fails or the shortest horizon is reached. Modes select
//! which constraint families and objective the optimizer sees.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointLimits, KinState};
use crate::sqp::{initial_guess, sqp_solve, ObjectiveKind, Recording, SqpConfig, SqpResult, Subproblem, TransportTask};
use crate::trajectory::Trajectory;

/// Constraint set and objective selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanMode {
    /// Every constraint, jerk objective.
    #[serde(rename = "fit")]
    Fit,
    /// No acceleration-cone or magnitude rows; jerk limits and objective kept.
    #[serde(rename = "j-gomp")]
    JGomp,
    /// As `JGomp`, without jerk limits and with an acceleration objective.
    #[serde(rename = "gomp")]
    Gomp,
    #[serde(rename = "fit-at-H")]
    FitAtH,
    #[serde(rename = "j-gomp-at-H")]
    JGompAtH,
    #[serde(rename = "gomp-at-H")]
    GompAtH,
}

impl PlanMode {
    pub const ALL: [PlanMode; 6] = [
        PlanMode::Fit,
        PlanMode::JGomp,
        PlanMode::Gomp,
        PlanMode::FitAtH,
        PlanMode::JGompAtH,
        PlanMode::GompAtH,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Fit => "fit",
            PlanMode::JGomp => "j-gomp",
            PlanMode::Gomp => "gomp",
            PlanMode::FitAtH => "fit-at-H",
            PlanMode::JGompAtH => "j-gomp-at-H",
            PlanMode::GompAtH => "gomp-at-H",
        }
    }

    /// The shrinking-horizon counterpart of a fixed-horizon mode.
    pub fn base(self) -> PlanMode {
        match self {
            PlanMode::FitAtH => PlanMode::Fit,
            PlanMode::JGompAtH => PlanMode::JGomp,
            PlanMode::GompAtH => PlanMode::Gomp,
            m => m,
        }
    }

    pub fn is_fixed_horizon(self) -> bool {
        self.base() != self
    }

    /// Restrict `task` to this mode's constraints and objective.
    pub fn configure(self, task: &TransportTask) -> TransportTask {
        let mut out = task.clone();
        match self.base() {
            PlanMode::Fit => {
                out.jerk_limits = true;
                out.objective = ObjectiveKind::Jerk;
            }
            PlanMode::JGomp => {
                out.profile = task.profile.without_acceleration();
                out.jerk_limits = true;
                out.objective = ObjectiveKind::Jerk;
            }
            _ => {
                out.profile = task.profile.without_acceleration();
                out.jerk_limits = false;
                out.objective = ObjectiveKind::Acceleration;
            }
        }
        out
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlanMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Scenario(format!(
                    "unknown mode `{s}` (expected one of fit, j-gomp, gomp, fit-at-H, j-gomp-at-H, gomp-at-H)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct PlanRequest {
    pub task: TransportTask,
    /// Joint-space seeds: pick, optional intermediate points, place.
    pub seeds: Vec<Vec<f64>>,
    pub h_max: usize,
    pub h_min: usize,
    pub mode: PlanMode,
    /// Horizon for the fixed-horizon modes.
    pub fixed_horizon: Option<usize>,
    pub config: SqpConfig,
    pub recording: Recording,
}

impl PlanRequest {
    pub fn validate(&self) -> Result<()> {
        if self.h_min < 2 {
            return Err(Error::Planning(format!("H_min must be >= 2, got {}", self.h_min)));
        }
        if self.h_max < self.h_min {
            return Err(Error::Planning(format!(
                "H_max {} is below H_min {}",
                self.h_max, self.h_min
            )));
        }
        if self.seeds.len() < 2 {
            return Err(Error::Planning("need pick and place seeds".into()));
        }
        match (self.mode.is_fixed_horizon(), self.fixed_horizon) {
            (true, None) => Err(Error::Planning(format!("mode {} needs a horizon", self.mode))),
            (true, Some(h)) if h < 2 => Err(Error::Planning(format!("horizon must be >= 2, got {h}"))),
            _ => Ok(()),
        }
    }
}

/// Outcome of the solve at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonOutcome {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub converged: bool,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub mode: PlanMode,
    /// Shortest converged horizon and its solve.
    pub best: Option<(usize, SqpResult)>,
    pub t_step: f64,
    pub per_horizon: Vec<HorizonOutcome>,
    pub solve_wall_seconds: f64,
    /// Subproblems kept by the recording policy, across all horizons.
    pub subproblems: Vec<Subproblem>,
}

/// Summary written next to the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanSummary {
    pub mode: PlanMode,
    #[serde(rename = "H_best")]
    pub h_best: Option<usize>,
    #[serde(rename = "T_seconds")]
    pub t_seconds: Option<f64>,
    pub converged: bool,
    #[serde(rename = "per_H")]
    pub per_h: Vec<HorizonOutcome>,
    pub solve_wall_seconds: f64,
}

impl PlanResult {
    pub fn converged(&self) -> bool {
        self.best.is_some()
    }

    pub fn h_best(&self) -> Option<usize> {
        self.best.as_ref().map(|(h, _)| *h)
    }

    pub fn duration(&self) -> Option<f64> {
        self.h_best().map(|h| h as f64 * self.t_step)
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.best.as_ref().map(|(_, r)| &r.trajectory)
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            mode: self.mode,
            h_best: self.h_best(),
            t_seconds: self.duration(),
            converged: self.converged(),
            per_h: self.per_horizon.clone(),
            solve_wall_seconds: self.solve_wall_seconds,
        }
    }
}

/// Resample `traj` onto `horizon` steps of the same length, compressing
/// time uniformly: velocities scale by the duration ratio, accelerations by
/// its square, then everything is clamped to the limits. The end states are
/// kept at rest.
pub fn time_rescale(traj: &Trajectory, horizon: usize, limits: &JointLimits) -> Trajectory {
    let h = traj.t_step;
    let ratio = traj.horizon() as f64 / horizon as f64;
    let n = traj.dof();
    let mut waypoints = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let state = if k == horizon {
            traj.waypoints[traj.horizon()].clone()
        } else {
            let src = k as f64 * ratio;
            let step = (src.floor() as usize).min(traj.horizon() - 1);
            traj.state_in_step(step, (src - step as f64) * h)
        };
        let mut q = state.q;
        let mut qd: Vec<f64> = state.qd.iter().map(|v| v * ratio).collect();
        let mut qdd: Vec<f64> = state.qdd.iter().map(|v| v * ratio * ratio).collect();
        for i in 0..n {
            q[i] = q[i].clamp(limits.position_lower[i], limits.position_upper[i]);
            qd[i] = qd[i].clamp(-limits.velocity[i], limits.velocity[i]);
            qdd[i] = qdd[i].clamp(-limits.acceleration[i], limits.acceleration[i]);
        }
        if k == 0 || k == horizon {
            qd.fill(0.0);
            qdd.fill(0.0);
        }
        waypoints.push(KinState::new(q, qd, qdd));
    }
    Trajectory::new(h, waypoints).expect("resampled waypoints share the source dimensions")
}

/// Run the shrinking-horizon search (or the single fixed-horizon solve).
/// A plan in which no horizon converges is reported through
/// `PlanResult::best == None` with the per-horizon diagnostics filled in.
pub fn plan(request: &PlanRequest) -> Result<PlanResult> {
    request.validate()?;
    let start = Instant::now();
    let task = request.mode.configure(&request.task);
    let t_step = task.t_step;
    let mut per_horizon = Vec::new();
    let mut subproblems = Vec::new();
    let mut best: Option<(usize, SqpResult)> = None;

    let first = request.fixed_horizon.filter(|_| request.mode.is_fixed_horizon()).unwrap_or(request.h_max);
    let last = if request.mode.is_fixed_horizon() { first } else { request.h_min };
    let mut initial = initial_guess(&task.model, &request.seeds, first, t_step)?;
    let mut horizon = first;
    loop {
        let mut result = match sqp_solve(&task, horizon, &initial, &request.config, &request.recording) {
            Ok(r) => r,
            // The warm start itself cannot be linearized: a failed horizon.
            Err(Error::NonFinite(_) | Error::DegenerateAcceleration(_)) => {
                per_horizon.push(HorizonOutcome {
                    horizon,
                    converged: false,
                    objective: f64::INFINITY,
                    max_violation: f64::INFINITY,
                    iterations: 0,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        per_horizon.push(HorizonOutcome {
            horizon,
            converged: result.converged,
            objective: result.objective,
            max_violation: result.max_violation,
            iterations: result.iterations,
        });
        subproblems.append(&mut result.subproblems);
        if !result.converged {
            break;
        }
        let done = horizon <= last;
        if !done {
            initial = time_rescale(&result.trajectory, horizon - 1, &task.model.limits);
        }
        best = Some((horizon, result));
        if done {
            break;
        }
        horizon -= 1;
    }
    Ok(PlanResult {
        mode: request.mode,
        best,
        t_step,
        per_horizon,
        solve_wall_seconds: start.elapsed().as_secs_f64(),
        subproblems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;
    use crate::constraints::{ConstraintProfile, ObstacleSet};
    use crate::kinematics::RobotModel;

    fn task(a: &[f64], b: &[f64]) -> TransportTask {
        let model = RobotModel::ur5();
        TransportTask {
            pick: model.forward_kinematics(a).unwrap(),
            place: model.forward_kinematics(b).unwrap(),
            model,
            obstacles: ObstacleSet::default(),
            profile: ConstraintProfile::default(),
            objective: ObjectiveKind::Jerk,
            jerk_limits: true,
            t_step: 0.032,
        }
    }

    fn request(a: Vec<f64>, b: Vec<f64>, h_max: usize, h_min: usize, mode: PlanMode) -> PlanRequest {
        PlanRequest {
            task: task(&a, &b),
            seeds: vec![a, b],
            h_max,
            h_min,
            mode,
            fixed_horizon: None,
            config: SqpConfig::default(),
            recording: Recording::default(),
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PlanMode::ALL {
            assert_eq!(m.as_str().parse::<PlanMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("fast".parse::<PlanMode>().is_err());
        assert_eq!(PlanMode::GompAtH.base(), PlanMode::Gomp);
        assert!(!PlanMode::JGomp.is_fixed_horizon());
    }

    #[test]
    fn modes_select_constraint_sets() {
        let mut t = task(&[0.0; 6], &[0.0; 6]);
        t.profile.theta_max = Some(0.5);
        t.profile.a_max = Some(19.6);
        let fit = PlanMode::Fit.configure(&t);
        assert_eq!(fit.profile.theta_max, Some(0.5));
        assert!(fit.jerk_limits);
        let j = PlanMode::JGomp.configure(&t);
        assert_eq!((j.profile.theta_max, j.profile.a_max), (None, None));
        assert!(j.jerk_limits);
        assert_eq!(j.objective, ObjectiveKind::Jerk);
        let g = PlanMode::GompAtH.configure(&t);
        assert!(!g.jerk_limits);
        assert_eq!(g.objective, ObjectiveKind::Acceleration);
    }

    #[test]
    fn rescale_preserves_uniform_time_scaling() {
        // Constant velocity, rest ends ignored: interior velocities scale by
        // the duration ratio.
        let h = 0.032;
        let n = 6;
        let horizon = 10;
        let v = 0.5;
        let wps = (0..=horizon)
            .map(|t| KinState::new(vec![v * t as f64 * h; n], vec![v; n], vec![0.0; n]))
            .collect();
        let traj = Trajectory::new(h, wps).unwrap();
        let limits = RobotModel::ur5().limits;
        let out = time_rescale(&traj, 5, &limits);
        assert_eq!(out.horizon(), 5);
        for k in 1..5 {
            let s = &out.waypoints[k];
            assert!((s.q[0] - v * 2.0 * k as f64 * h).abs() < 1e-12);
            assert!((s.qd[0] - 2.0 * v).abs() < 1e-12);
        }
        assert_eq!(out.waypoints[5].q, traj.waypoints[10].q);
        assert_eq!(out.waypoints[0].qd, vec![0.0; n]);
    }

    #[test]
    fn zero_distance_plan_reaches_minimum_horizon() {
        let q = vec![0.3, -1.2, 1.4, -1.8, -1.57, 0.0];
        let req = request(q.clone(), q.clone(), 6, 3, PlanMode::Fit);
        let res = plan(&req).unwrap();
        assert_eq!(res.h_best(), Some(3));
        assert_eq!(res.per_horizon.len(), 4);
        let traj = res.trajectory().unwrap();
        for w in &traj.waypoints {
            for i in 0..6 {
                assert!((w.q[i] - q[i]).abs() < 1e-6);
                assert!(w.qd[i].abs() < 1e-6);
            }
        }
        assert!((res.duration().unwrap() - 3.0 * 0.032).abs() < 1e-15);
    }

    #[test]
    fn shrinking_stops_at_first_failure() {
        // A 1.2 rad base swing cannot be done in a handful of steps under the
        // acceleration and jerk limits, so the search must stop above H_min
        // and report the last success.
        let a = vec![0.6, -1.2, 1.5, -1.87, -FRAC_PI_2, 0.0];
        let b = vec![-0.6, -1.2, 1.5, -1.87, -FRAC_PI_2, 0.0];
        let req = request(a, b, 30, 2, PlanMode::JGomp);
        let res = plan(&req).unwrap();
        let best = res.h_best().expect("H_max converges");
        assert!(best > 2);
        let last = res.per_horizon.last().unwrap();
        assert!(!last.converged);
        assert_eq!(last.horizon, best - 1);
        assert!(res.per_horizon[..res.per_horizon.len() - 1].iter().all(|o| o.converged));
        let traj = res.trajectory().unwrap();
        assert!(traj.max_dynamics_residual() <= 1e-6);
        let summary = serde_json::to_value(res.summary()).unwrap();
        assert_eq!(summary["H_best"], best);
        assert_eq!(summary["mode"], "j-gomp");
    }

    #[test]
    fn fixed_horizon_mode_solves_once() {
        let a = vec![0.6, -1.2, 1.5, -1.87, -FRAC_PI_2, 0.0];
        let b = vec![0.2, -1.2, 1.5, -1.87, -FRAC_PI_2, 0.0];
        let mut req = request(a, b, 40, 4, PlanMode::GompAtH);
        req.fixed_horizon = Some(20);
        let res = plan(&req).unwrap();
        assert_eq!(res.per_horizon.len(), 1);
        assert_eq!(res.h_best(), Some(20));
        req.fixed_horizon = None;
        assert!(plan(&req).is_err());
    }
}

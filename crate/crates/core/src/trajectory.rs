//! Discretized trajectories under the linear-jerk waypoint model.
//!
//! Between waypoints `t` and `t + 1` the joint jerk is constant, so
//! acceleration is linear, velocity quadratic and position cubic. The
//! waypoint dynamics relations follow from integrating that model exactly.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{check_len, Error, Result};
use crate::kinematics::KinState;

/// Dynamics residual above which a trajectory is not treated as feasible.
pub const FEASIBLE_RESIDUAL: f64 = 1e-6;

/// Index arithmetic for the stacked decision vector
/// `[q_0, qd_0, qdd_0, q_1, qd_1, qdd_1, ...]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub dof: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn new(dof: usize, horizon: usize) -> Self {
        Self { dof, horizon }
    }

    pub fn waypoints(&self) -> usize {
        self.horizon + 1
    }

    pub fn len(&self) -> usize {
        3 * self.dof * self.waypoints()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q(&self, t: usize, i: usize) -> usize {
        3 * self.dof * t + i
    }

    pub fn qd(&self, t: usize, i: usize) -> usize {
        3 * self.dof * t + self.dof + i
    }

    pub fn qdd(&self, t: usize, i: usize) -> usize {
        3 * self.dof * t + 2 * self.dof + i
    }

    /// First index of waypoint `t`'s block.
    pub fn block(&self, t: usize) -> usize {
        3 * self.dof * t
    }
}

/// Per-step residuals of the waypoint dynamics relations.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResidual {
    /// rad
    pub position: Vec<f64>,
    /// rad/s
    pub velocity: Vec<f64>,
}

/// H + 1 waypoints at a fixed time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t_step: f64,
    pub waypoints: Vec<KinState>,
}

/// Interpolation weights mapping `(q_t, qd_t, qdd_t, qdd_{t+1})` to the
/// state a fraction of the way through step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBlend {
    /// Coefficients of (q_t, qd_t, qdd_t, qdd_next) in q(s).
    pub q: [f64; 4],
    /// Coefficients of (qd_t, qdd_t, qdd_next) in qd(s).
    pub qd: [f64; 3],
    /// Coefficients of (qdd_t, qdd_next) in qdd(s).
    pub qdd: [f64; 2],
}

impl StepBlend {
    /// Weights for elapsed time `s` into a step of length `h`.
    pub fn new(s: f64, h: f64) -> Self {
        // jerk = (qdd_next - qdd_t) / h
        let s2 = s * s;
        let s3 = s2 * s;
        Self {
            q: [1.0, s, s2 / 2.0 - s3 / (6.0 * h), s3 / (6.0 * h)],
            qd: [1.0, s - s2 / (2.0 * h), s2 / (2.0 * h)],
            qdd: [1.0 - s / h, s / h],
        }
    }

    pub fn apply(&self, a: &KinState, b: &KinState) -> KinState {
        let n = a.dof();
        let mut q = Vec::with_capacity(n);
        let mut qd = Vec::with_capacity(n);
        let mut qdd = Vec::with_capacity(n);
        for i in 0..n {
            q.push(
                self.q[0] * a.q[i]
                    + self.q[1] * a.qd[i]
                    + self.q[2] * a.qdd[i]
                    + self.q[3] * b.qdd[i],
            );
            qd.push(self.qd[0] * a.qd[i] + self.qd[1] * a.qdd[i] + self.qd[2] * b.qdd[i]);
            qdd.push(self.qdd[0] * a.qdd[i] + self.qdd[1] * b.qdd[i]);
        }
        KinState { q, qd, qdd }
    }
}

impl Trajectory {
    pub fn new(t_step: f64, waypoints: Vec<KinState>) -> Result<Self> {
        let traj = Self { t_step, waypoints };
        traj.validate()?;
        Ok(traj)
    }

    /// `horizon + 1` copies of a resting configuration.
    pub fn stationary(q: &[f64], horizon: usize, t_step: f64) -> Self {
        Self {
            t_step,
            waypoints: vec![KinState::at_rest(q.to_vec()); horizon + 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_step > 0.0 && self.t_step.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "t_step must be positive, got {}",
                self.t_step
            )));
        }
        if self.waypoints.len() < 2 {
            return Err(Error::InvalidTrajectory("horizon must be at least 1".into()));
        }
        let n = self.waypoints[0].dof();
        for w in &self.waypoints {
            w.validate(n)?;
        }
        Ok(())
    }

    /// Check that `t_step` is a whole number of controller periods.
    pub fn check_controller_period(&self, period: f64) -> Result<()> {
        check_controller_multiple(self.t_step, period)
    }

    pub fn horizon(&self) -> usize {
        self.waypoints.len() - 1
    }

    pub fn dof(&self) -> usize {
        self.waypoints[0].dof()
    }

    pub fn duration(&self) -> f64 {
        self.horizon() as f64 * self.t_step
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.dof(), self.horizon())
    }

    pub fn to_stacked(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|w| w.to_stacked()).collect()
    }

    pub fn from_stacked(x: &[f64], layout: Layout, t_step: f64) -> Self {
        let block = 3 * layout.dof;
        let waypoints = (0..layout.waypoints())
            .map(|t| KinState::from_stacked(&x[t * block..(t + 1) * block]))
            .collect();
        Self { t_step, waypoints }
    }

    pub fn dynamics_residual(&self) -> Vec<StepResidual> {
        let h = self.t_step;
        self.waypoints
            .windows(2)
            .map(|w| {
                let (a, b) = (&w[0], &w[1]);
                let n = a.dof();
                let mut position = Vec::with_capacity(n);
                let mut velocity = Vec::with_capacity(n);
                for i in 0..n {
                    position.push(
                        b.q[i]
                            - a.q[i]
                            - a.qd[i] * h
                            - (a.qdd[i] / 3.0 + b.qdd[i] / 6.0) * h * h,
                    );
                    velocity.push(b.qd[i] - a.qd[i] - 0.5 * (a.qdd[i] + b.qdd[i]) * h);
                }
                StepResidual { position, velocity }
            })
            .collect()
    }

    /// Largest absolute dynamics residual over all steps and joints.
    pub fn max_dynamics_residual(&self) -> f64 {
        self.dynamics_residual()
            .iter()
            .flat_map(|r| r.position.iter().chain(&r.velocity))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Finite-difference jerk `(qdd_{t+1} - qdd_t) / t_step`, one row per step.
    pub fn jerk_vector(&self) -> Vec<Vec<f64>> {
        self.waypoints
            .windows(2)
            .map(|w| {
                w[0].qdd
                    .iter()
                    .zip(&w[1].qdd)
                    .map(|(a, b)| (b - a) / self.t_step)
                    .collect()
            })
            .collect()
    }

    /// State at elapsed time `s` into step `t` (0 <= s <= t_step).
    pub fn state_in_step(&self, t: usize, s: f64) -> KinState {
        StepBlend::new(s, self.t_step).apply(&self.waypoints[t], &self.waypoints[t + 1])
    }

    /// Sample every `t_step / substeps` under the linear-jerk model. The
    /// result is itself a feasible trajectory at the finer step.
    pub fn dense_resample(&self, substeps: usize) -> Result<Trajectory> {
        if substeps == 0 {
            return Err(Error::InvalidTrajectory("substeps must be >= 1".into()));
        }
        let worst = self.max_dynamics_residual();
        if !(worst <= FEASIBLE_RESIDUAL) {
            return Err(Error::InvalidTrajectory(format!(
                "dynamics residual {worst:.3e} exceeds {FEASIBLE_RESIDUAL:e}; trajectory is not feasible"
            )));
        }
        if substeps == 1 {
            return Ok(self.clone());
        }
        let fine = self.t_step / substeps as f64;
        let mut waypoints = Vec::with_capacity(self.horizon() * substeps + 1);
        for t in 0..self.horizon() {
            waypoints.push(self.waypoints[t].clone());
            for k in 1..substeps {
                waypoints.push(self.state_in_step(t, k as f64 * fine));
            }
        }
        waypoints.push(self.waypoints[self.horizon()].clone());
        Ok(Trajectory {
            t_step: fine,
            waypoints,
        })
    }

    /// CSV with header `t,q0..,qd0..,qdd0..`; 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.dof();
        let mut header = String::from("t");
        for prefix in ["q", "qd", "qdd"] {
            for i in 0..n {
                write!(header, ",{prefix}{i}").unwrap();
            }
        }
        writeln!(out, "{header}")?;
        for (k, w) in self.waypoints.iter().enumerate() {
            let mut row = sig9(k as f64 * self.t_step);
            for v in w.q.iter().chain(&w.qd).chain(&w.qdd) {
                row.push(',');
                row.push_str(&sig9(*v));
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

pub(crate) fn check_controller_multiple(t_step: f64, period: f64) -> Result<()> {
    if !(period > 0.0) {
        return Err(Error::InvalidTrajectory(format!(
            "controller period must be positive, got {period}"
        )));
    }
    let ratio = t_step / period;
    if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidTrajectory(format!(
            "t_step {t_step} is not an integer multiple of the controller period {period}"
        )));
    }
    Ok(())
}

/// Format with 9 significant digits, fixed notation where reasonable.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { format!("{v}") };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

/// Integrate the waypoint dynamics forward from `start` through the given
/// accelerations, producing an exactly feasible trajectory.
pub fn integrate(start: &KinState, accelerations: &[Vec<f64>], t_step: f64) -> Result<Trajectory> {
    let n = start.dof();
    check_len("accelerations[0]", n, accelerations.first().map_or(0, Vec::len))?;
    let mut waypoints = vec![KinState {
        q: start.q.clone(),
        qd: start.qd.clone(),
        qdd: accelerations[0].clone(),
    }];
    let h = t_step;
    for next_qdd in &accelerations[1..] {
        check_len("accelerations[t]", n, next_qdd.len())?;
        let a = waypoints.last().unwrap();
        let mut q = Vec::with_capacity(n);
        let mut qd = Vec::with_capacity(n);
        for i in 0..n {
            q.push(a.q[i] + a.qd[i] * h + (a.qdd[i] / 3.0 + next_qdd[i] / 6.0) * h * h);
            qd.push(a.qd[i] + 0.5 * (a.qdd[i] + next_qdd[i]) * h);
        }
        waypoints.push(KinState {
            q,
            qd,
            qdd: next_qdd.clone(),
        });
    }
    Trajectory::new(t_step, waypoints)
}

//! Independent audit of planned trajectories.
//!
//! The grasp point is resampled densely, its world position differentiated
//! twice by finite differences, and the result compared against the
//! recursive forward pass the planner optimized. The finite-difference
//! signal stands in for an accelerometer on the container.

use std::io::Write;

use nalgebra::Vector3;
use serde::Serialize;

use crate::constraints::ObstacleSet;
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::par;
use crate::trajectory::{sig9, Trajectory};

/// Coarsest audit grid accepted; sparser grids miss peaks between samples.
pub const MIN_ORACLE_SUBSTEPS: usize = 4;
/// Stencil width as a fraction of the step: small enough that truncation
/// error is negligible, large enough that rounding in the positions is too.
const STENCIL_FRACTION: f64 = 1e-3;
pub const DEFAULT_AUDIT_SUBSTEPS: usize = 16;
/// Slack on the alignment verdict (deg).
pub const ANGLE_TOLERANCE_DEG: f64 = 0.5;
/// Relative slack on the magnitude verdict.
pub const MAGNITUDE_TOLERANCE: f64 = 0.01;

/// Inertial acceleration of the grasp point at every dense sample, from
/// second differences of forward-kinematics positions. Add the support
/// reaction to compare against gravito-inertial values.
///
/// Each sample gets its own stencil, much narrower than the sample spacing
/// and kept inside one step: the jerk jumps at waypoints, so a stencil that
/// straddled two steps would mix two cubic pieces.
pub fn fd_accel_oracle(model: &RobotModel, traj: &Trajectory, substeps: usize) -> Result<Vec<Vector3<f64>>> {
    if substeps < MIN_ORACLE_SUBSTEPS {
        return Err(Error::InvalidTrajectory(format!(
            "oracle needs substeps >= {MIN_ORACLE_SUBSTEPS}, got {substeps}"
        )));
    }
    // Rejects infeasible trajectories the same way the audit grid does.
    traj.dense_resample(1)?;
    let horizon = traj.horizon();
    let fine = traj.t_step / substeps as f64;
    let h = traj.t_step * STENCIL_FRACTION;
    let samples: Vec<(usize, f64)> = (0..horizon * substeps)
        .map(|k| (k / substeps, (k % substeps) as f64 * fine))
        .chain(std::iter::once((horizon - 1, traj.t_step)))
        .collect();
    let position = |t: usize, s: f64| -> Result<Vector3<f64>> {
        let state = traj.state_in_step(t, s);
        Ok(model.forward_kinematics(&state.q)?.translation.vector)
    };
    par::map(&samples, |&(t, s)| -> Result<Vector3<f64>> {
        let h2 = h * h;
        if s == 0.0 {
            let p: Vec<_> = (0..4).map(|i| position(t, i as f64 * h)).collect::<Result<_>>()?;
            Ok((2.0 * p[0] - 5.0 * p[1] + 4.0 * p[2] - p[3]) / h2)
        } else if s == traj.t_step {
            let p: Vec<_> = (0..4).map(|i| position(t, s - i as f64 * h)).collect::<Result<_>>()?;
            Ok((2.0 * p[0] - 5.0 * p[1] + 4.0 * p[2] - p[3]) / h2)
        } else {
            Ok((position(t, s + h)? - 2.0 * position(t, s)? + position(t, s - h)?) / h2)
        }
    })
    .into_iter()
    .collect()
}

/// Requirements a trajectory is audited against.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditLimits {
    /// rad
    pub theta_max: Option<f64>,
    /// m/s^2
    pub a_max: Option<f64>,
    pub obstacles: ObstacleSet,
    pub substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSample {
    pub t: f64,
    /// Measured gravito-inertial acceleration, world frame (m/s^2).
    pub accel: [f64; 3],
    /// Angle between the measured acceleration and the container normal.
    pub angle_deg: f64,
    pub magnitude: f64,
    /// Smallest sphere-to-obstacle surface distance; absent without obstacles.
    pub min_clearance: Option<f64>,
}

/// `None` marks a requirement the scenario does not impose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Verdicts {
    pub alignment: Option<bool>,
    pub magnitude: Option<bool>,
    pub clearance: Option<bool>,
}

impl Verdicts {
    pub fn passed(&self) -> bool {
        [self.alignment, self.magnitude, self.clearance]
            .into_iter()
            .all(|v| v != Some(false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub substeps: usize,
    pub sample_count: usize,
    /// Spacing of the dense samples (s).
    pub sample_step: f64,
    /// Sum over samples of the gap between measured and planned magnitudes.
    pub ie: f64,
    /// Sum over samples of the measured magnitude in excess of the cap.
    pub ive: Option<f64>,
    pub max_angle_deg: f64,
    pub max_magnitude: f64,
    pub min_clearance: Option<f64>,
    pub theta_max_deg: Option<f64>,
    pub a_max: Option<f64>,
    pub verdicts: Verdicts,
    pub passed: bool,
    /// Largest relative gap between measured and planned acceleration over
    /// interior samples.
    pub max_interior_rel_error: f64,
    #[serde(skip)]
    pub samples: Vec<AuditSample>,
}

impl AuditReport {
    /// CSV `t,ax,ay,az,angle_deg,mag,min_clearance`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,ax,ay,az,angle_deg,mag,min_clearance")?;
        for s in &self.samples {
            let clearance = s.min_clearance.map(sig9).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                sig9(s.t),
                sig9(s.accel[0]),
                sig9(s.accel[1]),
                sig9(s.accel[2]),
                sig9(s.angle_deg),
                sig9(s.magnitude),
                clearance
            )?;
        }
        Ok(())
    }
}

fn angle_deg(a: &Vector3<f64>, normal: &Vector3<f64>) -> f64 {
    let mag = a.norm();
    if mag == 0.0 {
        return 180.0;
    }
    (a.dot(normal) / mag).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Audit `traj` against `limits`. Violations are reported, never raised.
pub fn audit(model: &RobotModel, traj: &Trajectory, limits: &AuditLimits) -> Result<AuditReport> {
    let measured = fd_accel_oracle(model, traj, limits.substeps)?;
    let dense = traj.dense_resample(limits.substeps)?;
    let support = model.support();

    struct Planned {
        accel: Vector3<f64>,
        normal: Vector3<f64>,
        clearance: Option<f64>,
    }
    let planned: Vec<Planned> = par::map(&dense.waypoints, |w| -> Result<Planned> {
        let frames = model.frames(&w.q)?;
        let centers = model.sphere_centers(&frames);
        let clearance = (!limits.obstacles.is_empty()).then(|| {
            let mut best = f64::INFINITY;
            for (sphere, c) in model.collision_spheres.iter().zip(&centers) {
                for k in 0..limits.obstacles.len() {
                    best = best.min(limits.obstacles.signed_distance(k, c).0 - sphere.radius);
                }
            }
            best
        });
        Ok(Planned {
            accel: support + model.rne_forward(w)?,
            normal: frames.grasp_rotation * model.tool.normal,
            clearance,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let m = measured.len();
    let mut samples = Vec::with_capacity(m);
    let mut ie = 0.0;
    let mut ive = 0.0;
    let mut max_rel = 0.0f64;
    for (k, (inertial, p)) in measured.iter().zip(&planned).enumerate() {
        let a = support + inertial;
        let mag = a.norm();
        ie += (mag - p.accel.norm()).abs();
        if let Some(cap) = limits.a_max {
            ive += (mag - cap).max(0.0);
        }
        if k > 0 && k + 1 < m {
            max_rel = max_rel.max((a - p.accel).norm() / p.accel.norm().max(1e-12));
        }
        samples.push(AuditSample {
            t: k as f64 * dense.t_step,
            accel: [a.x, a.y, a.z],
            angle_deg: angle_deg(&a, &p.normal),
            magnitude: mag,
            min_clearance: p.clearance,
        });
    }

    let max_angle_deg = samples.iter().map(|s| s.angle_deg).fold(0.0, f64::max);
    let max_magnitude = samples.iter().map(|s| s.magnitude).fold(0.0, f64::max);
    let min_clearance = samples
        .iter()
        .filter_map(|s| s.min_clearance)
        .reduce(f64::min);
    let verdicts = Verdicts {
        alignment: limits
            .theta_max
            .map(|t| max_angle_deg <= t.to_degrees() + ANGLE_TOLERANCE_DEG),
        magnitude: limits
            .a_max
            .map(|cap| max_magnitude <= cap * (1.0 + MAGNITUDE_TOLERANCE)),
        clearance: min_clearance.map(|c| c >= 0.0),
    };
    Ok(AuditReport {
        substeps: limits.substeps,
        sample_count: m,
        sample_step: dense.t_step,
        ie,
        ive: limits.a_max.map(|_| ive),
        max_angle_deg,
        max_magnitude,
        min_clearance,
        theta_max_deg: limits.theta_max.map(f64::to_degrees),
        a_max: limits.a_max,
        passed: verdicts.passed(),
        verdicts,
        max_interior_rel_error: max_rel,
        samples,
    })
}

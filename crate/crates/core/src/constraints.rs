//! Constraint functions and their linearizations.
//!
//! Convex constraints (waypoint dynamics, actuation boxes, jerk limits,
//! boundary conditions) are emitted as exact rows. Non-convex constraints
//! (endpoint poses, obstacle clearance, acceleration cone and cap) are
//! evaluated at sample states and linearized about the current iterate.

use nalgebra::{IsometryMatrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ChainFrames, JointLimits, KinState, RobotModel};
use crate::trajectory::{Layout, StepBlend};

/// Gravito-inertial magnitude below which the alignment direction is
/// treated as undefined (m/s^2).
pub const DEGENERATE_ACCEL: f64 = 0.1;

/// Default central-difference step for constraint Jacobians.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Default obstacle safety margin (m).
pub const DEFAULT_D_SAFE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointMode {
    #[default]
    FullPose,
    /// Position plus the tool normal direction; spin about the normal is free.
    PositionPlusAxis,
}

impl EndpointMode {
    pub fn residual_len(self) -> usize {
        match self {
            EndpointMode::FullPose => 6,
            EndpointMode::PositionPlusAxis => 5,
        }
    }
}

/// Acceleration and clearance requirements for one transport task.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintProfile {
    /// Cone half-angle about the container normal (rad).
    pub theta_max: Option<f64>,
    /// Cap on the gravito-inertial acceleration magnitude (m/s^2).
    pub a_max: Option<f64>,
    /// Obstacle safety margin (m).
    pub d_safe: f64,
    pub endpoint_mode: EndpointMode,
}

impl Default for ConstraintProfile {
    fn default() -> Self {
        Self {
            theta_max: None,
            a_max: None,
            d_safe: DEFAULT_D_SAFE,
            endpoint_mode: EndpointMode::FullPose,
        }
    }
}

impl ConstraintProfile {
    pub fn validate(&self, gravity: f64) -> Result<()> {
        if let Some(t) = self.theta_max {
            if !(t > 0.0 && t <= std::f64::consts::FRAC_PI_2) {
                return Err(Error::InvalidProfile(format!(
                    "theta_max must lie in (0, pi/2], got {t}"
                )));
            }
        }
        if let Some(a) = self.a_max {
            if !(a > gravity) {
                return Err(Error::InvalidProfile(format!(
                    "a_max {a} must exceed gravity {gravity}; the object could not rest"
                )));
            }
        }
        if !(self.d_safe >= 0.0) {
            return Err(Error::InvalidProfile("d_safe must be >= 0".into()));
        }
        Ok(())
    }

    /// Same profile without the acceleration constraints.
    pub fn without_acceleration(&self) -> Self {
        Self {
            theta_max: None,
            a_max: None,
            ..self.clone()
        }
    }
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            name: None,
            min,
            max,
        }
    }

    /// Signed distance from `p` to the box surface (negative inside) and the
    /// outward unit normal at the closest surface point.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let lo = Vector3::from(self.min);
        let hi = Vector3::from(self.max);
        let clamped = p.zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
        let d = p - clamped;
        let dist = d.norm();
        if dist > 0.0 {
            return (dist, d / dist);
        }
        // Inside: the nearest face wins.
        let mut best = f64::INFINITY;
        let mut normal = Vector3::z();
        for axis in 0..3 {
            let to_lo = p[axis] - lo[axis];
            let to_hi = hi[axis] - p[axis];
            if to_lo < best {
                best = to_lo;
                normal = -Vector3::ith(axis, 1.0);
            }
            if to_hi < best {
                best = to_hi;
                normal = Vector3::ith(axis, 1.0);
            }
        }
        (-best, normal)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSet {
    #[serde(default)]
    pub boxes: Vec<Aabb>,
    /// Height of a floor half-space, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_z: Option<f64>,
}

impl ObstacleSet {
    pub fn validate(&self) -> Result<()> {
        for (k, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|i| !(b.min[i] < b.max[i])) {
                return Err(Error::Scenario(format!(
                    "box {k}: min corner must be below max corner on every axis"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len() + usize::from(self.floor_z.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Signed distance and outward normal for obstacle index `k`; the floor
    /// (if present) comes after the boxes.
    pub fn signed_distance(&self, k: usize, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self.boxes.get(k) {
            Some(b) => b.signed_distance(p),
            None => {
                let z = self.floor_z.expect("obstacle index out of range");
                (p.z - z, Vector3::z())
            }
        }
    }

    pub fn label(&self, k: usize) -> String {
        match self.boxes.get(k) {
            Some(Aabb { name: Some(n), .. }) => n.clone(),
            Some(_) => format!("box{k}"),
            None => "floor".into(),
        }
    }
}

/// Clearance of one sphere against one obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleResidual {
    pub sphere: usize,
    pub obstacle: usize,
    /// Signed distance minus radius minus safety margin; negative violates.
    pub residual: f64,
    /// Outward unit normal at the closest obstacle point.
    pub normal: Vector3<f64>,
}

/// Penalty bucket a linearized row belongs to. `Hard` rows get no slack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlackGroup {
    Hard,
    Endpoint,
    Obstacle,
    Alignment,
    Magnitude,
}

/// One row `lower <= coeffs . x <= upper` over the stacked decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
    pub group: SlackGroup,
    pub label: String,
}

impl LinearizedConstraint {
    pub fn hard(coeffs: Vec<(usize, f64)>, lower: f64, upper: f64, label: String) -> Self {
        Self {
            coeffs,
            lower,
            upper,
            group: SlackGroup::Hard,
            label,
        }
    }

    pub fn is_equality(&self) -> bool {
        self.lower == self.upper
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v = self.value(x);
        (self.lower - v).max(v - self.upper).max(0.0)
    }

    /// Inequality sides this row contributes when written as `A x <= b`.
    pub fn one_sided_count(&self) -> usize {
        if self.is_equality() {
            1
        } else {
            usize::from(self.lower.is_finite()) + usize::from(self.upper.is_finite())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coeffs.iter().any(|(_, a)| !a.is_finite()) {
            return Err(Error::NonFinite(self.label.clone()));
        }
        if !(self.lower <= self.upper) {
            return Err(Error::InvalidProblem(format!(
                "row `{}` has lower bound above upper bound",
                self.label
            )));
        }
        Ok(())
    }
}

/// cos(theta_max) - a_ee . f_n / |a_ee|; non-positive when the
/// gravito-inertial acceleration lies inside the cone about the normal.
pub fn alignment_residual(model: &RobotModel, state: &KinState, theta_max: f64) -> Result<f64> {
    let a = model.gravito_inertial_accel(state)?;
    let n = model.grasp_normal(&state.q)?;
    alignment_from(&a, &n, theta_max)
}

fn alignment_from(a: &Vector3<f64>, normal: &Vector3<f64>, theta_max: f64) -> Result<f64> {
    let mag = a.norm();
    if mag <= DEGENERATE_ACCEL {
        return Err(Error::DegenerateAcceleration(mag));
    }
    Ok(theta_max.cos() - a.dot(normal) / mag)
}

/// |a_ee| - a_max; non-positive when satisfied.
pub fn magnitude_residual(model: &RobotModel, state: &KinState, a_max: f64) -> Result<f64> {
    Ok(model.gravito_inertial_accel(state)?.norm() - a_max)
}

/// Clearance residuals of every collision sphere against every obstacle.
pub fn obstacle_residuals(
    model: &RobotModel,
    q: &[f64],
    obstacles: &ObstacleSet,
    d_safe: f64,
) -> Result<Vec<ObstacleResidual>> {
    let frames = model.frames(q)?;
    Ok(obstacle_residuals_in(model, &frames, obstacles, d_safe))
}

pub(crate) fn obstacle_residuals_in(
    model: &RobotModel,
    frames: &ChainFrames,
    obstacles: &ObstacleSet,
    d_safe: f64,
) -> Vec<ObstacleResidual> {
    let centers = model.sphere_centers(frames);
    let mut out = Vec::with_capacity(centers.len() * obstacles.len());
    for (s, (sphere, c)) in model.collision_spheres.iter().zip(&centers).enumerate() {
        for k in 0..obstacles.len() {
            let (dist, normal) = obstacles.signed_distance(k, c);
            out.push(ObstacleResidual {
                sphere: s,
                obstacle: k,
                residual: dist - sphere.radius - d_safe,
                normal,
            });
        }
    }
    out
}

/// Deviation of the grasp frame from `target`. Full pose: position error
/// then the rotation vector of `R_target^T R_actual`. Position plus axis:
/// position error then the tool normal's components orthogonal to the
/// target normal.
pub fn endpoint_residual(
    model: &RobotModel,
    q: &[f64],
    target: &IsometryMatrix3<f64>,
    mode: EndpointMode,
) -> Result<Vec<f64>> {
    let pose = model.forward_kinematics(q)?;
    let dp = pose.translation.vector - target.translation.vector;
    let mut r = vec![dp.x, dp.y, dp.z];
    match mode {
        EndpointMode::FullPose => {
            let rel: Rotation3<f64> = target.rotation.inverse() * pose.rotation;
            r.extend(rel.scaled_axis().iter());
        }
        EndpointMode::PositionPlusAxis => {
            let want = target.rotation * model.tool.normal;
            let have = pose.rotation * model.tool.normal;
            let (e1, e2) = orthonormal_complement(&want);
            r.push(have.dot(&e1));
            r.push(have.dot(&e2));
        }
    }
    Ok(r)
}

/// Two unit vectors completing `v` to a right-handed orthonormal basis.
pub fn orthonormal_complement(v: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let v = v.normalize();
    let seed = if v.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = (seed - v * v.dot(&seed)).normalize();
    let e2 = v.cross(&e1);
    (e1, e2)
}

/// Where a constraint is evaluated along the trajectory: `offset` seconds
/// into step `step`. Offset 0 is waypoint `step` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub step: usize,
    pub offset: f64,
}

impl SamplePoint {
    pub fn waypoint(t: usize) -> Self {
        Self { step: t, offset: 0.0 }
    }

    pub fn is_waypoint(&self) -> bool {
        self.offset == 0.0
    }

    /// Waypoints plus `substeps - 1` interior points per step.
    pub fn grid(horizon: usize, t_step: f64, substeps: usize) -> Vec<Self> {
        let mut out = Vec::with_capacity(horizon * substeps.max(1) + 1);
        for t in 0..horizon {
            out.push(Self::waypoint(t));
            for k in 1..substeps {
                out.push(Self {
                    step: t,
                    offset: k as f64 * t_step / substeps as f64,
                });
            }
        }
        out.push(Self::waypoint(horizon));
        out
    }

    pub fn time(&self, t_step: f64) -> f64 {
        self.step as f64 * t_step + self.offset
    }

    pub fn state(&self, x: &[f64], layout: Layout, t_step: f64) -> KinState {
        let n = layout.dof;
        let a = &x[layout.block(self.step)..layout.block(self.step) + 3 * n];
        let a = KinState::from_stacked(a);
        if self.is_waypoint() {
            return a;
        }
        let b = KinState::from_stacked(
            &x[layout.block(self.step + 1)..layout.block(self.step + 1) + 3 * n],
        );
        StepBlend::new(self.offset, t_step).apply(&a, &b)
    }

    /// Map a gradient with respect to the sample state onto the decision
    /// vector.
    pub fn chain(
        &self,
        layout: Layout,
        t_step: f64,
        d_q: &[f64],
        d_qd: &[f64],
        d_qdd: &[f64],
    ) -> Vec<(usize, f64)> {
        let n = layout.dof;
        let t = self.step;
        if self.is_waypoint() {
            let mut out = Vec::with_capacity(3 * n);
            for i in 0..n {
                out.push((layout.q(t, i), d_q[i]));
            }
            for i in 0..n {
                out.push((layout.qd(t, i), d_qd[i]));
            }
            for i in 0..n {
                out.push((layout.qdd(t, i), d_qdd[i]));
            }
            out.retain(|&(_, v)| v != 0.0);
            return out;
        }
        let w = StepBlend::new(self.offset, t_step);
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            out.push((layout.q(t, i), w.q[0] * d_q[i]));
        }
        for i in 0..n {
            out.push((layout.qd(t, i), w.q[1] * d_q[i] + w.qd[0] * d_qd[i]));
        }
        for i in 0..n {
            out.push((
                layout.qdd(t, i),
                w.q[2] * d_q[i] + w.qd[1] * d_qd[i] + w.qdd[0] * d_qdd[i],
            ));
        }
        for i in 0..n {
            out.push((
                layout.qdd(t + 1, i),
                w.q[3] * d_q[i] + w.qd[2] * d_qd[i] + w.qdd[1] * d_qdd[i],
            ));
        }
        out.retain(|&(_, v)| v != 0.0);
        out
    }
}

/// Value and gradient (over the stacked decision vector) of a scalar
/// constraint function at the current iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub value: f64,
    pub gradient: Vec<(usize, f64)>,
}

impl Linearization {
    fn at_iterate(&self, x: &[f64]) -> f64 {
        self.gradient.iter().map(|&(j, g)| g * x[j]).sum()
    }

    /// Row for `g(x) <= bound`: `J x <= J x_k - g(x_k) + bound`.
    pub fn upper_row(&self, x: &[f64], bound: f64, group: SlackGroup, label: String) -> LinearizedConstraint {
        LinearizedConstraint {
            coeffs: self.gradient.clone(),
            lower: f64::NEG_INFINITY,
            upper: self.at_iterate(x) - self.value + bound,
            group,
            label,
        }
    }

    /// Row for `g(x) >= bound`.
    pub fn lower_row(&self, x: &[f64], bound: f64, group: SlackGroup, label: String) -> LinearizedConstraint {
        LinearizedConstraint {
            coeffs: self.gradient.clone(),
            lower: self.at_iterate(x) - self.value + bound,
            upper: f64::INFINITY,
            group,
            label,
        }
    }

    /// Row for `g(x) = 0`.
    pub fn equality_row(&self, x: &[f64], group: SlackGroup, label: String) -> LinearizedConstraint {
        let b = self.at_iterate(x) - self.value;
        LinearizedConstraint {
            coeffs: self.gradient.clone(),
            lower: b,
            upper: b,
            group,
            label,
        }
    }
}

/// Central-difference linearization of a vector-valued function of the
/// state at `point`, with respect to the stacked decision vector `x`.
pub fn linearize<F>(
    f: F,
    point: &SamplePoint,
    x: &[f64],
    layout: Layout,
    t_step: f64,
    h_fd: f64,
) -> Result<Vec<Linearization>>
where
    F: Fn(&KinState) -> Result<Vec<f64>>,
{
    let n = layout.dof;
    let state = point.state(x, layout, t_step);
    let center = f(&state)?;
    if center.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("constraint value".into()));
    }
    let m = center.len();
    let mut stacked = state.to_stacked();
    let mut grads = vec![vec![0.0; 3 * n]; m];
    for c in 0..3 * n {
        let orig = stacked[c];
        stacked[c] = orig + h_fd;
        let plus = f(&KinState::from_stacked(&stacked))?;
        stacked[c] = orig - h_fd;
        let minus = f(&KinState::from_stacked(&stacked))?;
        stacked[c] = orig;
        for k in 0..m {
            let d = (plus[k] - minus[k]) / (2.0 * h_fd);
            if !d.is_finite() {
                return Err(Error::NonFinite("constraint derivative".into()));
            }
            grads[k][c] = d;
        }
    }
    Ok(center
        .into_iter()
        .zip(grads)
        .map(|(value, g)| Linearization {
            value,
            gradient: point.chain(layout, t_step, &g[..n], &g[n..2 * n], &g[2 * n..]),
        })
        .collect())
}

/// Options for the exact convex rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexOptions {
    pub jerk_limits: bool,
}

impl Default for ConvexOptions {
    fn default() -> Self {
        Self { jerk_limits: true }
    }
}

/// Exact rows for the waypoint dynamics, actuation boxes, jerk limits and
/// rest-to-rest boundary conditions, in that order.
pub fn convex_rows(
    layout: Layout,
    t_step: f64,
    limits: &JointLimits,
    options: ConvexOptions,
) -> Vec<LinearizedConstraint> {
    let n = layout.dof;
    let hz = layout.horizon;
    let h = t_step;
    let mut rows = Vec::new();

    for t in 0..hz {
        for i in 0..n {
            rows.push(LinearizedConstraint::hard(
                vec![
                    (layout.q(t + 1, i), 1.0),
                    (layout.q(t, i), -1.0),
                    (layout.qd(t, i), -h),
                    (layout.qdd(t, i), -h * h / 3.0),
                    (layout.qdd(t + 1, i), -h * h / 6.0),
                ],
                0.0,
                0.0,
                format!("dyn_q[{t}][{i}]"),
            ));
        }
        for i in 0..n {
            rows.push(LinearizedConstraint::hard(
                vec![
                    (layout.qd(t + 1, i), 1.0),
                    (layout.qd(t, i), -1.0),
                    (layout.qdd(t, i), -0.5 * h),
                    (layout.qdd(t + 1, i), -0.5 * h),
                ],
                0.0,
                0.0,
                format!("dyn_qd[{t}][{i}]"),
            ));
        }
    }

    for t in 0..=hz {
        for i in 0..n {
            rows.push(LinearizedConstraint::hard(
                vec![(layout.q(t, i), 1.0)],
                limits.position_lower[i],
                limits.position_upper[i],
                format!("q[{t}][{i}]"),
            ));
        }
        for i in 0..n {
            rows.push(LinearizedConstraint::hard(
                vec![(layout.qd(t, i), 1.0)],
                -limits.velocity[i],
                limits.velocity[i],
                format!("qd[{t}][{i}]"),
            ));
        }
        for i in 0..n {
            rows.push(LinearizedConstraint::hard(
                vec![(layout.qdd(t, i), 1.0)],
                -limits.acceleration[i],
                limits.acceleration[i],
                format!("qdd[{t}][{i}]"),
            ));
        }
    }

    if options.jerk_limits {
        for t in 0..hz {
            for i in 0..n {
                let bound = limits.jerk[i] * h;
                rows.push(LinearizedConstraint::hard(
                    vec![(layout.qdd(t + 1, i), 1.0), (layout.qdd(t, i), -1.0)],
                    -bound,
                    bound,
                    format!("jerk[{t}][{i}]"),
                ));
            }
        }
    }

    for t in [0, hz] {
        for i in 0..n {
            rows.push(LinearizedConstraint::hard(
                vec![(layout.qd(t, i), 1.0)],
                0.0,
                0.0,
                format!("rest_qd[{t}][{i}]"),
            ));
            rows.push(LinearizedConstraint::hard(
                vec![(layout.qdd(t, i), 1.0)],
                0.0,
                0.0,
                format!("rest_qdd[{t}][{i}]"),
            ));
        }
    }
    rows
}

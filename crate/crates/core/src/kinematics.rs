//! Serial-chain kinematics: forward kinematics, geometric Jacobians and the
//! forward recursive Newton-Euler pass that yields the linear acceleration of
//! the grasp point.
//!
//! Frame convention: frame `k` sits on joint `k` and is rotated by that
//! joint's angle. Its parent rotation is `Rot(axis_k, q_k) * R_fixed_k`, with
//! `axis_k` expressed in the parent frame. `translation_k` is the link vector
//! from joint `k` to joint `k + 1` (or to the flange for the last joint),
//! expressed in frame `k`. Joint 0 sits at the world origin.

use nalgebra::{
    IsometryMatrix3, Matrix3, OMatrix, Rotation3, Translation3, Unit, Vector3, Dyn, U3,
};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Standard gravity, m/s^2.
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// 3 x n Jacobian.
pub type Jacobian3 = OMatrix<f64, U3, Dyn>;

/// One revolute joint of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    /// Unit rotation axis in the parent frame.
    pub axis: Vector3<f64>,
    /// Fixed rotation applied after the joint rotation, parent to child.
    pub fixed_rotation: Matrix3<f64>,
    /// Link vector to the next joint origin, in this joint's frame (m).
    pub translation: Vector3<f64>,
    origin_rpy: [f64; 3],
}

impl JointSpec {
    pub fn new(axis: [f64; 3], origin_rotation_rpy: [f64; 3], translation: [f64; 3]) -> Self {
        let [r, p, y] = origin_rotation_rpy;
        Self {
            axis: Vector3::from(axis),
            fixed_rotation: *Rotation3::from_euler_angles(r, p, y).matrix(),
            translation: Vector3::from(translation),
            origin_rpy: origin_rotation_rpy,
        }
    }

    /// Rotation from this joint's frame to its parent frame at angle `q`.
    pub fn parent_rotation(&self, q: f64) -> Matrix3<f64> {
        let axis = Unit::new_unchecked(self.axis);
        *Rotation3::from_axis_angle(&axis, q).matrix() * self.fixed_rotation
    }
}

/// Per-joint bounds. Velocity, acceleration and jerk bounds are symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLimits {
    pub position_lower: Vec<f64>,
    pub position_upper: Vec<f64>,
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub jerk: Vec<f64>,
}

impl JointLimits {
    pub fn uniform(n: usize, position: f64, velocity: f64, acceleration: f64, jerk: f64) -> Self {
        Self {
            position_lower: vec![-position; n],
            position_upper: vec![position; n],
            velocity: vec![velocity; n],
            acceleration: vec![acceleration; n],
            jerk: vec![jerk; n],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        check_len("limits.position_lower", n, self.position_lower.len())?;
        check_len("limits.position_upper", n, self.position_upper.len())?;
        check_len("limits.velocity", n, self.velocity.len())?;
        check_len("limits.acceleration", n, self.acceleration.len())?;
        check_len("limits.jerk", n, self.jerk.len())?;
        for i in 0..n {
            if !(self.position_lower[i] < self.position_upper[i]) {
                return Err(Error::InvalidModel(format!(
                    "joint {i}: position lower bound must be below upper bound"
                )));
            }
            for (name, v) in [
                ("velocity", self.velocity[i]),
                ("acceleration", self.acceleration[i]),
                ("jerk", self.jerk[i]),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "joint {i}: {name} bound must be strictly positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed transform from the flange (end of the last link) to the grasp frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolFrame {
    /// Rotation from grasp frame to last joint frame.
    pub rotation: Matrix3<f64>,
    /// Offset from the flange to the grasp point, in the last joint frame (m).
    pub translation: Vector3<f64>,
    /// Container normal, in the grasp frame.
    pub normal: Vector3<f64>,
    rpy: [f64; 3],
}

impl ToolFrame {
    pub fn new(rotation_rpy: [f64; 3], translation: [f64; 3], normal: [f64; 3]) -> Self {
        let [r, p, y] = rotation_rpy;
        Self {
            rotation: *Rotation3::from_euler_angles(r, p, y).matrix(),
            translation: Vector3::from(translation),
            normal: Vector3::from(normal),
            rpy: rotation_rpy,
        }
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], [0.0; 3], [0.0, 0.0, 1.0])
    }
}

/// Collision sphere rigidly attached to the frame of joint `link`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionSphere {
    pub link: usize,
    pub offset: [f64; 3],
    pub radius: f64,
}

/// Revolute serial chain with limits, grasp frame and collision geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRobotModel", into = "RawRobotModel")]
pub struct RobotModel {
    pub joints: Vec<JointSpec>,
    pub limits: JointLimits,
    pub tool: ToolFrame,
    pub collision_spheres: Vec<CollisionSphere>,
    /// Physical gravity in the world frame (points down).
    pub gravity: Vector3<f64>,
}

/// World-frame placement of every joint frame at one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    /// World rotation of each joint frame.
    pub rotations: Vec<Matrix3<f64>>,
    /// World origin of each joint frame (a point on the joint axis).
    pub origins: Vec<Vector3<f64>>,
    /// World direction of each joint axis.
    pub axes: Vec<Vector3<f64>>,
    pub grasp_rotation: Matrix3<f64>,
    pub grasp_position: Vector3<f64>,
}

/// Joint positions, velocities and accelerations at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl KinState {
    pub fn new(q: Vec<f64>, qd: Vec<f64>, qdd: Vec<f64>) -> Self {
        Self { q, qd, qdd }
    }

    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: vec![0.0; n],
            qdd: vec![0.0; n],
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_len("state.q", n, self.q.len())?;
        check_len("state.qd", n, self.qd.len())?;
        check_len("state.qdd", n, self.qdd.len())?;
        if self
            .q
            .iter()
            .chain(&self.qd)
            .chain(&self.qdd)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidTrajectory("non-finite state entry".into()));
        }
        Ok(())
    }

    /// Stacked `[q, qd, qdd]`.
    pub fn to_stacked(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.q.len());
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.qd);
        v.extend_from_slice(&self.qdd);
        v
    }

    pub fn from_stacked(v: &[f64]) -> Self {
        let n = v.len() / 3;
        Self {
            q: v[..n].to_vec(),
            qd: v[n..2 * n].to_vec(),
            qdd: v[2 * n..3 * n].to_vec(),
        }
    }
}

/// Angular and linear motion of the grasp frame from the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GraspMotion {
    /// Linear acceleration of the grasp point, world frame (m/s^2).
    pub linear_acceleration: Vector3<f64>,
    /// Angular velocity of the grasp frame, world frame (rad/s).
    pub angular_velocity: Vector3<f64>,
    /// Angular acceleration of the grasp frame, world frame (rad/s^2).
    pub angular_acceleration: Vector3<f64>,
}

impl RobotModel {
    pub fn new(
        joints: Vec<JointSpec>,
        limits: JointLimits,
        tool: ToolFrame,
        collision_spheres: Vec<CollisionSphere>,
        gravity: Vector3<f64>,
    ) -> Result<Self> {
        let model = Self {
            joints,
            limits,
            tool,
            collision_spheres,
            gravity,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::InvalidModel("chain has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidModel(format!(
                    "joint {i}: axis norm {} is not 1",
                    j.axis.norm()
                )));
            }
        }
        self.limits.validate(n)?;
        if (self.tool.normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel("tool normal must be a unit vector".into()));
        }
        for (k, s) in self.collision_spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(Error::InvalidModel(format!("sphere {k}: radius must be > 0")));
            }
            if s.link >= n {
                return Err(Error::InvalidModel(format!(
                    "sphere {k}: link {} out of range",
                    s.link
                )));
            }
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::InvalidModel("gravity must be finite".into()));
        }
        Ok(())
    }

    /// Upward support reaction that balances gravity at rest.
    pub fn support(&self) -> Vector3<f64> {
        -self.gravity
    }

    /// World placement of every joint frame and the grasp frame.
    pub fn frames(&self, q: &[f64]) -> Result<ChainFrames> {
        check_len("q", self.dof(), q.len())?;
        let n = self.dof();
        let mut rotations = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        let mut rot = Matrix3::identity();
        let mut origin = Vector3::zeros();
        for (joint, &qi) in self.joints.iter().zip(q) {
            axes.push(rot * joint.axis);
            rot *= joint.parent_rotation(qi);
            rotations.push(rot);
            origins.push(origin);
            origin += rot * joint.translation;
        }
        let last = rotations[n - 1];
        let grasp_position = origin + last * self.tool.translation;
        let grasp_rotation = last * self.tool.rotation;
        Ok(ChainFrames {
            rotations,
            origins,
            axes,
            grasp_rotation,
            grasp_position,
        })
    }

    /// World pose of the grasp frame.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<IsometryMatrix3<f64>> {
        let f = self.frames(q)?;
        Ok(IsometryMatrix3::from_parts(
            Translation3::from(f.grasp_position),
            Rotation3::from_matrix_unchecked(f.grasp_rotation),
        ))
    }

    /// Container normal in the world frame.
    pub fn grasp_normal(&self, q: &[f64]) -> Result<Vector3<f64>> {
        let f = self.frames(q)?;
        Ok(f.grasp_rotation * self.tool.normal)
    }

    /// World position of every collision sphere center.
    pub fn sphere_centers(&self, frames: &ChainFrames) -> Vec<Vector3<f64>> {
        self.collision_spheres
            .iter()
            .map(|s| frames.origins[s.link] + frames.rotations[s.link] * Vector3::from(s.offset))
            .collect()
    }

    /// Geometric position Jacobian of the grasp point.
    pub fn position_jacobian(&self, q: &[f64]) -> Result<Jacobian3> {
        let f = self.frames(q)?;
        Ok(Self::point_jacobian_in(&f, self.dof() - 1, &f.grasp_position))
    }

    /// Geometric position Jacobian of collision sphere `index`'s center.
    pub fn sphere_jacobian(&self, q: &[f64], index: usize) -> Result<Jacobian3> {
        let sphere = self.collision_spheres.get(index).ok_or_else(|| {
            Error::InvalidModel(format!("no collision sphere with index {index}"))
        })?;
        let f = self.frames(q)?;
        let center = f.origins[sphere.link] + f.rotations[sphere.link] * Vector3::from(sphere.offset);
        Ok(Self::point_jacobian_in(&f, sphere.link, &center))
    }

    /// Jacobian of a world point rigidly attached to frame `link`; joints
    /// past `link` get zero columns.
    pub fn point_jacobian_in(frames: &ChainFrames, link: usize, point: &Vector3<f64>) -> Jacobian3 {
        let n = frames.axes.len();
        let mut jac = Jacobian3::zeros(n);
        for j in 0..=link.min(n - 1) {
            let col = frames.axes[j].cross(&(point - frames.origins[j]));
            jac.set_column(j, &col);
        }
        jac
    }

    /// Forward recursive Newton-Euler pass. Propagates angular velocity,
    /// angular acceleration and linear acceleration from the base through
    /// every joint, then through the tool offset as a final fixed link.
    pub fn rne_motion(&self, state: &KinState) -> Result<GraspMotion> {
        let n = self.dof();
        check_len("state.q", n, state.q.len())?;
        check_len("state.qd", n, state.qd.len())?;
        check_len("state.qdd", n, state.qdd.len())?;

        let mut omega = Vector3::zeros();
        let mut omega_dot = Vector3::zeros();
        let mut accel = Vector3::zeros();
        let mut world = Matrix3::identity();
        for (i, joint) in self.joints.iter().enumerate() {
            let rot = joint.parent_rotation(state.q[i]);
            let rt = rot.transpose();
            let z = joint.axis;
            let r = joint.translation;
            let omega_prev = omega;
            omega = rt * (omega_prev + state.qd[i] * z);
            omega_dot = rt * (omega_dot + state.qdd[i] * z + state.qd[i] * omega_prev.cross(&z));
            accel = rt * accel + omega_dot.cross(&r) + omega.cross(&omega.cross(&r));
            world *= rot;
        }

        // Tool offset: fixed rotation, link vector expressed in the grasp frame.
        let rt = self.tool.rotation.transpose();
        let r = rt * self.tool.translation;
        omega = rt * omega;
        omega_dot = rt * omega_dot;
        accel = rt * accel + omega_dot.cross(&r) + omega.cross(&omega.cross(&r));
        world *= self.tool.rotation;

        Ok(GraspMotion {
            linear_acceleration: world * accel,
            angular_velocity: world * omega,
            angular_acceleration: world * omega_dot,
        })
    }

    /// Linear acceleration of the grasp point, world frame (m/s^2).
    pub fn rne_forward(&self, state: &KinState) -> Result<Vector3<f64>> {
        Ok(self.rne_motion(state)?.linear_acceleration)
    }

    /// Specific force felt by the grasped object: support reaction plus the
    /// inertial acceleration. Points world-up at rest and vanishes in free
    /// fall.
    pub fn gravito_inertial_accel(&self, state: &KinState) -> Result<Vector3<f64>> {
        Ok(self.support() + self.rne_forward(state)?)
    }

    /// Reference UR5 with a top-held open container as the grasped object.
    pub fn ur5() -> Self {
        use std::f64::consts::{FRAC_PI_2, PI};
        let joints = vec![
            JointSpec::new([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.089159]),
            JointSpec::new([0.0, -1.0, 0.0], [FRAC_PI_2, 0.0, 0.0], [-0.425, 0.0, 0.0]),
            JointSpec::new([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-0.39225, 0.0, 0.0]),
            JointSpec::new([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.10915]),
            JointSpec::new([0.0, -1.0, 0.0], [FRAC_PI_2, 0.0, 0.0], [0.0, 0.0, 0.09465]),
            JointSpec::new([0.0, 1.0, 0.0], [-FRAC_PI_2, 0.0, 0.0], [0.0, 0.0, 0.0823]),
        ];
        // Rated joint speed (rad/s), not an approximation of pi.
        #[allow(clippy::approx_constant)]
        const RATED_SPEED: f64 = 3.14;
        let limits = JointLimits::uniform(6, 2.0 * PI, RATED_SPEED, 8.0, 1000.0);
        // The flange z axis points down in the usual top-down grasp; the
        // container opening faces the other way.
        let tool = ToolFrame::new([PI, 0.0, 0.0], [0.0, 0.0, 0.14], [0.0, 0.0, 1.0]);
        let sphere = |link, offset: [f64; 3], radius| CollisionSphere {
            link,
            offset,
            radius,
        };
        let collision_spheres = vec![
            sphere(1, [-0.12, 0.0, 0.0], 0.06),
            sphere(1, [-0.26, 0.0, 0.0], 0.06),
            sphere(1, [-0.40, 0.0, 0.0], 0.06),
            sphere(2, [-0.10, 0.0, 0.0], 0.05),
            sphere(2, [-0.22, 0.0, 0.0], 0.05),
            sphere(2, [-0.34, 0.0, 0.0], 0.05),
            sphere(3, [0.0, 0.0, 0.06], 0.05),
            sphere(4, [0.0, 0.0, 0.05], 0.045),
            sphere(5, [0.0, 0.0, 0.12], 0.045),
            sphere(5, [0.0, 0.0, 0.22], 0.05),
        ];
        Self::new(
            joints,
            limits,
            tool,
            collision_spheres,
            Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        )
        .expect("reference UR5 model is valid")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    #[serde(default = "revolute", rename = "type")]
    kind: String,
    axis: [f64; 3],
    origin_rotation_rpy: [f64; 3],
    translation: [f64; 3],
}

fn revolute() -> String {
    "revolute".into()
}

fn unit_z() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTool {
    rotation_rpy: [f64; 3],
    translation: [f64; 3],
    #[serde(default = "unit_z")]
    normal: [f64; 3],
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -STANDARD_GRAVITY]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRobotModel {
    joints: Vec<RawJoint>,
    limits: JointLimits,
    tool_frame: RawTool,
    #[serde(default)]
    collision_spheres: Vec<CollisionSphere>,
    #[serde(default = "default_gravity")]
    gravity: [f64; 3],
}

impl TryFrom<RawRobotModel> for RobotModel {
    type Error = Error;

    fn try_from(raw: RawRobotModel) -> Result<Self> {
        let mut joints = Vec::with_capacity(raw.joints.len());
        for (i, j) in raw.joints.into_iter().enumerate() {
            if j.kind != "revolute" {
                return Err(Error::InvalidModel(format!(
                    "joint {i}: only revolute joints are supported, got `{}`",
                    j.kind
                )));
            }
            joints.push(JointSpec::new(j.axis, j.origin_rotation_rpy, j.translation));
        }
        RobotModel::new(
            joints,
            raw.limits,
            ToolFrame::new(
                raw.tool_frame.rotation_rpy,
                raw.tool_frame.translation,
                raw.tool_frame.normal,
            ),
            raw.collision_spheres,
            Vector3::from(raw.gravity),
        )
    }
}

impl From<RobotModel> for RawRobotModel {
    fn from(m: RobotModel) -> Self {
        Self {
            joints: m
                .joints
                .iter()
                .map(|j| RawJoint {
                    kind: revolute(),
                    axis: j.axis.into(),
                    origin_rotation_rpy: j.origin_rpy,
                    translation: j.translation.into(),
                })
                .collect(),
            limits: m.limits,
            tool_frame: RawTool {
                rotation_rpy: m.tool.rpy,
                translation: m.tool.translation.into(),
                normal: m.tool.normal.into(),
            },
            collision_spheres: m.collision_spheres,
            gravity: m.gravity.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn single_joint(length: f64) -> RobotModel {
        RobotModel::new(
            vec![JointSpec::new([0.0, 0.0, 1.0], [0.0; 3], [length, 0.0, 0.0])],
            JointLimits::uniform(1, 3.0, 3.0, 10.0, 100.0),
            ToolFrame::identity(),
            vec![CollisionSphere {
                link: 0,
                offset: [length, 0.0, 0.0],
                radius: 0.05,
            }],
            Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        )
        .unwrap()
    }

    #[test]
    fn zero_configuration_is_fixed_transform_product() {
        let m = RobotModel::ur5();
        let pose = m.forward_kinematics(&[0.0; 6]).unwrap();
        let mut rot = Matrix3::identity();
        let mut p = Vector3::zeros();
        for j in &m.joints {
            rot *= j.fixed_rotation;
            p += rot * j.translation;
        }
        let p = p + rot * m.tool.translation;
        rot *= m.tool.rotation;
        assert!((pose.translation.vector - p).norm() < 1e-12);
        assert!((pose.rotation.matrix() - rot).norm() < 1e-12);
    }

    #[test]
    fn quarter_turn_single_joint() {
        let m = single_joint(0.7);
        let pose = m.forward_kinematics(&[FRAC_PI_2]).unwrap();
        assert!((pose.translation.vector - Vector3::new(0.0, 0.7, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = RobotModel::ur5();
        assert!(matches!(
            m.forward_kinematics(&[0.0; 5]),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = KinState::at_rest(vec![0.0; 4]);
        assert!(m.rne_forward(&bad).is_err());
    }

    #[test]
    fn world_aligned_grasp_normal_is_up() {
        let m = single_joint(0.5);
        let n = m.grasp_normal(&[0.3]).unwrap();
        assert!((n - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn pitched_grasp_normal() {
        // Tool pitched 90 degrees about world x maps z to -y.
        let mut m = single_joint(0.5);
        m.tool = ToolFrame::new([FRAC_PI_2, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0]);
        let n = m.grasp_normal(&[0.0]).unwrap();
        assert!((n - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rest_state_has_zero_inertial_acceleration() {
        let m = RobotModel::ur5();
        let s = KinState::at_rest(vec![0.3, -1.2, 1.1, -0.7, 0.4, 2.0]);
        assert!(m.rne_forward(&s).unwrap().norm() < 1e-14);
        let a = m.gravito_inertial_accel(&s).unwrap();
        assert!((a - Vector3::new(0.0, 0.0, STANDARD_GRAVITY)).norm() < 1e-12);
    }

    #[test]
    fn centripetal_single_joint() {
        let l = 0.8;
        let w = 2.5;
        let m = single_joint(l);
        let s = KinState::new(vec![0.4], vec![w], vec![0.0]);
        let a = m.rne_forward(&s).unwrap();
        let p = m.forward_kinematics(&[0.4]).unwrap().translation.vector;
        assert!((a.norm() - w * w * l).abs() < 1e-12);
        // Directed toward the axis.
        assert!((a.normalize() + p.normalize()).norm() < 1e-12);
    }

    #[test]
    fn free_fall_cancels_support() {
        // Single joint about world x carrying a point at +y; an angular
        // acceleration chosen so the point accelerates straight down at 1G.
        let l = 0.5;
        let m = RobotModel::new(
            vec![JointSpec::new([1.0, 0.0, 0.0], [0.0; 3], [0.0, l, 0.0])],
            JointLimits::uniform(1, 3.0, 3.0, 100.0, 1000.0),
            ToolFrame::identity(),
            vec![],
            Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        )
        .unwrap();
        let s = KinState::new(vec![0.0], vec![0.0], vec![-STANDARD_GRAVITY / l]);
        let a = m.gravito_inertial_accel(&s).unwrap();
        assert!(a.norm() < 1e-12, "{a:?}");
    }

    #[test]
    fn single_joint_jacobian_column() {
        let m = single_joint(0.6);
        let j = m.position_jacobian(&[0.0]).unwrap();
        assert!((j.column(0) - Vector3::new(0.0, 0.6, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn upstream_sphere_ignores_downstream_joints() {
        let m = RobotModel::ur5();
        let q = [0.2, -1.0, 1.3, -0.5, -1.5, 0.1];
        let j = m.sphere_jacobian(&q, 0).unwrap();
        let link = m.collision_spheres[0].link;
        for c in link + 1..6 {
            assert_eq!(j.column(c).norm(), 0.0);
        }
        assert!(j.column(0).norm() > 0.0);
    }

    #[test]
    fn model_validation() {
        let mut m = RobotModel::ur5();
        m.joints[0].axis = Vector3::new(0.0, 0.0, 1.1);
        assert!(m.validate().is_err());
        let mut m = RobotModel::ur5();
        m.limits.jerk[2] = 0.0;
        assert!(m.validate().is_err());
        let mut m = RobotModel::ur5();
        m.collision_spheres[0].radius = 0.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn prismatic_joint_rejected_at_load() {
        let mut v = serde_json::to_value(RobotModel::ur5()).unwrap();
        v["joints"][2]["type"] = "prismatic".into();
        let err = serde_json::from_value::<RobotModel>(v).unwrap_err();
        assert!(err.to_string().contains("revolute"));
    }

    #[test]
    fn json_round_trip() {
        let m = RobotModel::ur5();
        let s = serde_json::to_string(&m).unwrap();
        let back: RobotModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }
}

//! Scenario files: robot, obstacles, endpoints, limits and solver settings
//! for one transport task.

use std::fmt;
use std::path::{Path, PathBuf};

use carryplan::constraints::{ConstraintProfile, EndpointMode, ObstacleSet, DEFAULT_D_SAFE};
use carryplan::planner::{PlanMode, PlanRequest};
use carryplan::sqp::{ObjectiveKind, Recording, SqpConfig, TransportTask};
use carryplan::verify::{AuditLimits, DEFAULT_AUDIT_SUBSTEPS, MIN_ORACLE_SUBSTEPS};
use carryplan::RobotModel;
use nalgebra::{IsometryMatrix3, Quaternion, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
/// Name of the obstacle a height sweep resizes.
pub const WALL_NAME: &str = "wall";
const QUATERNION_NORM_TOL: f64 = 1e-6;

/// Schema or consistency problem, with the offending field when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError {
    pub field: String,
    pub message: String,
}

impl ScenarioError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "field `{}`: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ScenarioError {}

type Checked<T> = std::result::Result<T, ScenarioError>;

/// Where the robot model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RobotSource {
    /// A built-in model by name (`"ur5"`).
    Builtin(String),
    /// A model file, relative to the scenario file.
    File(RobotFile),
    Inline(RobotModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotFile {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    /// m, world frame.
    pub position: [f64; 3],
    /// Orientation of the grasp frame as `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    /// Joint configuration near this pose; the initial guess starts here.
    pub seed: Vec<f64>,
}

impl PoseSpec {
    fn isometry(&self, field: &str) -> Checked<IsometryMatrix3<f64>> {
        let [w, x, y, z] = self.quaternion;
        let quat = Quaternion::new(w, x, y, z);
        let norm = quat.norm();
        if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) {
            return Err(ScenarioError::new(
                format!("{field}.quaternion"),
                format!("norm {norm} is not 1 within {QUATERNION_NORM_TOL:e}"),
            ));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(ScenarioError::new(format!("{field}.position"), "must be finite"));
        }
        let rotation = UnitQuaternion::from_quaternion(quat).to_rotation_matrix();
        Ok(IsometryMatrix3::from_parts(Translation3::from(self.position), rotation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_max_deg: Option<f64>,
    /// m/s^2
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    /// m
    #[serde(default = "default_d_safe")]
    pub d_safe: f64,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            theta_max_deg: None,
            a_max: None,
            d_safe: DEFAULT_D_SAFE,
        }
    }
}

fn default_d_safe() -> f64 {
    DEFAULT_D_SAFE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonRange {
    pub min: usize,
    pub max: usize,
}

impl Default for HorizonRange {
    fn default() -> Self {
        Self { min: 4, max: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    pub substeps: usize,
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self {
            substeps: DEFAULT_AUDIT_SUBSTEPS,
        }
    }
}

fn default_t_step() -> f64 {
    0.032
}

fn default_controller_period() -> f64 {
    0.008
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub robot: RobotSource,
    #[serde(default)]
    pub obstacles: ObstacleSet,
    pub pick: PoseSpec,
    pub place: PoseSpec,
    /// Intermediate joint configurations the initial guess passes through.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub via_seeds: Vec<Vec<f64>>,
    #[serde(default)]
    pub endpoint_mode: EndpointMode,
    #[serde(default)]
    pub profile: ProfileSpec,
    /// s
    #[serde(default = "default_t_step")]
    pub t_step: f64,
    /// s
    #[serde(default = "default_controller_period")]
    pub controller_period: f64,
    #[serde(default)]
    pub horizon: HorizonRange,
    #[serde(default)]
    pub solver: SqpConfig,
    #[serde(default)]
    pub audit: AuditSpec,
}

/// Command-line adjustments applied on top of a scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub theta_max_deg: Option<f64>,
    pub a_max: Option<f64>,
    pub t_step: Option<f64>,
}

/// A scenario with its robot loaded and every field checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub model: RobotModel,
    pub pick: IsometryMatrix3<f64>,
    pub place: IsometryMatrix3<f64>,
}

impl Scenario {
    /// Parse and check schema-level structure. Errors name the field path
    /// and the line and column.
    pub fn from_json(text: &str) -> Checked<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." { String::new() } else { path };
            ScenarioError::new(field, inner.to_string())
        })?;
        if scenario.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::new(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", scenario.schema_version),
            ));
        }
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Checked<Resolved> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::new("", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Scenario::from_json(&text)?.resolve(base)
    }

    /// Canonical serialization; parsing it back yields an equal scenario.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(t) = overrides.theta_max_deg {
            self.profile.theta_max_deg = Some(t);
        }
        if let Some(a) = overrides.a_max {
            self.profile.a_max = Some(a);
        }
        if let Some(h) = overrides.t_step {
            self.t_step = h;
        }
    }

    /// Copy with the obstacle named `wall` rising `height` above its base.
    pub fn with_wall_height(&self, height: f64) -> Checked<Self> {
        if !(height > 0.0 && height.is_finite()) {
            return Err(ScenarioError::new("height", format!("must be positive, got {height}")));
        }
        let mut out = self.clone();
        let wall = out
            .obstacles
            .boxes
            .iter_mut()
            .find(|b| b.name.as_deref() == Some(WALL_NAME))
            .ok_or_else(|| ScenarioError::new("obstacles.boxes", format!("no box named `{WALL_NAME}`")))?;
        wall.max[2] = wall.min[2] + height;
        Ok(out)
    }

    /// Load the robot (relative paths resolve against `base`) and check
    /// every cross-field invariant.
    pub fn resolve(self, base: &Path) -> Checked<Resolved> {
        let model = match &self.robot {
            RobotSource::Builtin(name) if name.eq_ignore_ascii_case("ur5") => RobotModel::ur5(),
            RobotSource::Builtin(name) => {
                return Err(ScenarioError::new("robot", format!("unknown built-in robot `{name}`")))
            }
            RobotSource::File(file) => {
                let path = base.join(&file.path);
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    ScenarioError::new("robot.path", format!("cannot read {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| ScenarioError::new("robot.path", format!("{}: {e}", path.display())))?
            }
            RobotSource::Inline(model) => model.clone(),
        };
        let n = model.dof();
        let pick = self.pick.isometry("pick")?;
        let place = self.place.isometry("place")?;
        let seeds = [("pick.seed", &self.pick.seed), ("place.seed", &self.place.seed)]
            .into_iter()
            .chain(self.via_seeds.iter().map(|s| ("via_seeds", s)));
        for (field, seed) in seeds {
            if seed.len() != n {
                return Err(ScenarioError::new(field, format!("expected {n} joints, got {}", seed.len())));
            }
            let lim = &model.limits;
            for (i, q) in seed.iter().enumerate() {
                let (lo, hi) = (lim.position_lower[i], lim.position_upper[i]);
                if !(lo..=hi).contains(q) {
                    return Err(ScenarioError::new(
                        field,
                        format!("joint {i} value {q} outside [{lo}, {hi}]"),
                    ));
                }
            }
        }
        let check = |ok: bool, field: &str, msg: String| if ok { Ok(()) } else { Err(ScenarioError::new(field, msg)) };
        check(
            self.horizon.min >= 2 && self.horizon.max >= self.horizon.min,
            "horizon",
            format!("need 2 <= min <= max, got min {} max {}", self.horizon.min, self.horizon.max),
        )?;
        check(
            self.audit.substeps >= MIN_ORACLE_SUBSTEPS,
            "audit.substeps",
            format!("must be >= {MIN_ORACLE_SUBSTEPS}"),
        )?;
        check(self.profile.d_safe >= 0.0, "profile.d_safe", "must be >= 0".into())?;
        carryplan::trajectory::Trajectory::stationary(&self.pick.seed, 1, self.t_step)
            .check_controller_period(self.controller_period)
            .map_err(|e| ScenarioError::new("t_step", e.to_string()))?;
        self.constraint_profile()
            .validate(model.gravity.norm())
            .map_err(|e| ScenarioError::new("profile", e.to_string()))?;
        self.obstacles
            .validate()
            .map_err(|e| ScenarioError::new("obstacles", e.to_string()))?;
        self.solver
            .validate(n)
            .map_err(|e| ScenarioError::new("solver", e.to_string()))?;
        Ok(Resolved {
            scenario: self,
            model,
            pick,
            place,
        })
    }

    pub fn constraint_profile(&self) -> ConstraintProfile {
        ConstraintProfile {
            theta_max: self.profile.theta_max_deg.map(f64::to_radians),
            a_max: self.profile.a_max,
            d_safe: self.profile.d_safe,
            endpoint_mode: self.endpoint_mode,
        }
    }
}

impl Resolved {
    pub fn task(&self) -> TransportTask {
        TransportTask {
            model: self.model.clone(),
            obstacles: self.scenario.obstacles.clone(),
            pick: self.pick,
            place: self.place,
            profile: self.scenario.constraint_profile(),
            objective: ObjectiveKind::Jerk,
            jerk_limits: true,
            t_step: self.scenario.t_step,
        }
    }

    /// Pick seed, via seeds, place seed.
    pub fn seeds(&self) -> Vec<Vec<f64>> {
        let s = &self.scenario;
        std::iter::once(s.pick.seed.clone())
            .chain(s.via_seeds.iter().cloned())
            .chain(std::iter::once(s.place.seed.clone()))
            .collect()
    }

    pub fn plan_request(&self, mode: PlanMode, fixed_horizon: Option<usize>, recording: Recording) -> PlanRequest {
        PlanRequest {
            task: self.task(),
            seeds: self.seeds(),
            h_max: self.scenario.horizon.max,
            h_min: self.scenario.horizon.min,
            mode,
            fixed_horizon,
            config: self.scenario.solver.clone(),
            recording,
        }
    }

    /// Audit against the scenario's own requirements, whatever the mode.
    pub fn audit_limits(&self) -> AuditLimits {
        AuditLimits {
            theta_max: self.scenario.profile.theta_max_deg.map(f64::to_radians),
            a_max: self.scenario.profile.a_max,
            obstacles: self.scenario.obstacles.clone(),
            substeps: self.scenario.audit.substeps,
        }
    }
}

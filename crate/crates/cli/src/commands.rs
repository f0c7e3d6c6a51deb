//! The `plan` and `sweep` commands as library calls.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use carryplan::planner::{plan, PlanMode, PlanResult, PlanSummary};
use carryplan::sqp::Recording;
use carryplan::trajectory::sig9;
use carryplan::verify::{audit, AuditReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::scenario::{Overrides, Resolved, Scenario, ScenarioError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const SCHEMA: i32 = 1;
    pub const PLANNING: i32 = 2;
    pub const AUDIT: i32 = 3;
}

#[derive(Debug)]
pub enum CommandError {
    /// Unreadable, malformed or inconsistent input.
    Input(ScenarioError),
    /// Anything that went wrong after the inputs were accepted.
    Run(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Input(_) => exit::SCHEMA,
            CommandError::Run(_) => exit::PLANNING,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Input(e) => write!(f, "invalid scenario: {e}"),
            CommandError::Run(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CommandError {}

impl From<ScenarioError> for CommandError {
    fn from(e: ScenarioError) -> Self {
        CommandError::Input(e)
    }
}

fn run_err(e: impl std::fmt::Display) -> CommandError {
    CommandError::Run(e.to_string())
}

/// Read a scenario file, apply overrides, and resolve it.
pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Resolved, CommandError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ScenarioError { field: String::new(), message: format!("cannot read {}: {e}", path.display()) })?;
    let mut scenario = Scenario::from_json(&text)?;
    scenario.apply(overrides);
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(scenario.resolve(base)?)
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub scenario: PathBuf,
    pub mode: PlanMode,
    pub overrides: Overrides,
    /// Horizon for the fixed-horizon modes.
    pub horizon: Option<usize>,
    /// Also write the trajectory resampled this many times per step.
    pub dense: Option<usize>,
    pub trace: bool,
    pub audit: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub dump_qp: Option<PathBuf>,
}

/// Summary file contents. Only `solve_wall_seconds` depends on the clock.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: Option<String>,
    pub seed: u64,
    pub theta_max_deg: Option<f64>,
    pub a_max: Option<f64>,
    pub t_step: f64,
    #[serde(flatten)]
    pub plan: PlanSummary,
    pub audit_passed: Option<bool>,
    pub max_angle_deg: Option<f64>,
    pub ie: Option<f64>,
    pub ive: Option<f64>,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub exit_code: i32,
    pub result: PlanResult,
    pub audit: Option<AuditReport>,
    pub summary: RunSummary,
}

/// Plan, audit, and write the outputs into `opts.out`.
pub fn run_plan(opts: &PlanOptions) -> Result<PlanOutcome, CommandError> {
    let resolved = load_scenario(&opts.scenario, &opts.overrides)?;
    if opts.mode.is_fixed_horizon() && opts.horizon.is_none() {
        return Err(CommandError::Input(ScenarioError {
            field: "--H".into(),
            message: format!("mode {} needs a horizon", opts.mode),
        }));
    }
    fs::create_dir_all(&opts.out).map_err(run_err)?;
    if let Some(dir) = &opts.dump_qp {
        fs::create_dir_all(dir).map_err(run_err)?;
    }
    let recording = Recording {
        keep_every: 0,
        dump_dir: opts.dump_qp.clone(),
    };
    let request = resolved.plan_request(opts.mode, opts.horizon, recording);
    let result = plan(&request).map_err(run_err)?;

    let report = match (result.trajectory(), opts.audit) {
        (Some(traj), true) => Some(audit(&resolved.model, traj, &resolved.audit_limits()).map_err(run_err)?),
        _ => None,
    };
    let summary = RunSummary {
        scenario: resolved.scenario.name.clone(),
        seed: opts.seed,
        theta_max_deg: resolved.scenario.profile.theta_max_deg,
        a_max: resolved.scenario.profile.a_max,
        t_step: resolved.scenario.t_step,
        plan: result.summary(),
        audit_passed: report.as_ref().map(|r| r.passed),
        max_angle_deg: report.as_ref().map(|r| r.max_angle_deg),
        ie: report.as_ref().map(|r| r.ie),
        ive: report.as_ref().and_then(|r| r.ive),
    };
    write_outputs(opts, &result, report.as_ref(), &summary)?;

    let exit_code = if !result.converged() {
        exit::PLANNING
    } else if report.as_ref().is_some_and(|r| !r.passed) {
        exit::AUDIT
    } else {
        exit::OK
    };
    Ok(PlanOutcome {
        exit_code,
        result,
        audit: report,
        summary,
    })
}

fn create(path: PathBuf) -> Result<BufWriter<File>, CommandError> {
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CommandError::Run(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<(), CommandError> {
    serde_json::to_writer_pretty(create(path)?, value).map_err(run_err)
}

fn write_outputs(
    opts: &PlanOptions,
    result: &PlanResult,
    report: Option<&AuditReport>,
    summary: &RunSummary,
) -> Result<(), CommandError> {
    let out = &opts.out;
    write_json(out.join("summary.json"), summary)?;
    if let Some(traj) = result.trajectory() {
        traj.write_csv(create(out.join("trajectory.csv"))?).map_err(run_err)?;
        if let Some(n) = opts.dense {
            let dense = traj.dense_resample(n).map_err(run_err)?;
            dense.write_csv(create(out.join("trajectory_dense.csv"))?).map_err(run_err)?;
        }
    }
    if let Some(r) = report {
        r.write_csv(create(out.join("audit.csv"))?).map_err(run_err)?;
        write_json(out.join("audit.json"), r)?;
    }
    if opts.trace {
        let trace = result.best.as_ref().map(|(_, r)| &r.trace);
        write_json(out.join("trace.json"), &trace)?;
    }
    Ok(())
}

/// One sweep column: a mode and, for the fit modes, a cone angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSpec {
    pub mode: PlanMode,
    pub theta_max_deg: Option<f64>,
}

impl FromStr for ModeSpec {
    type Err = String;

    /// `fit45`, `fit:45`, `j-gomp`, `gomp`.
    fn from_str(s: &str) -> Result<Self, String> {
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .filter(|&i| i > 0)
            .unwrap_or(s.len());
        let (name, angle) = s.split_at(split);
        let name = name.strip_suffix(':').unwrap_or(name);
        let mode: PlanMode = name.parse().map_err(|e: carryplan::Error| e.to_string())?;
        if mode.is_fixed_horizon() {
            return Err(format!("sweep does not support fixed-horizon mode `{mode}`"));
        }
        let theta_max_deg = if angle.is_empty() {
            None
        } else {
            Some(angle.parse::<f64>().map_err(|e| format!("bad angle in `{s}`: {e}"))?)
        };
        Ok(ModeSpec { mode, theta_max_deg })
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub template: PathBuf,
    pub heights: Vec<f64>,
    pub modes: Vec<ModeSpec>,
    pub overrides: Overrides,
    pub jobs: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub height: f64,
    pub mode: PlanMode,
    pub theta_max: Option<f64>,
    #[serde(rename = "T_seconds")]
    pub t_seconds: Option<f64>,
    pub converged: bool,
    pub max_angle: Option<f64>,
    /// Why the cell produced no plan, if it errored.
    #[serde(skip)]
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn sweep_cell(template: &Scenario, base: &Path, height: f64, column: ModeSpec, overrides: &Overrides) -> SweepRow {
    let mut row = SweepRow {
        height,
        mode: column.mode,
        theta_max: None,
        t_seconds: None,
        converged: false,
        max_angle: None,
        error: None,
        wall_seconds: 0.0,
    };
    let attempt = || -> Result<(Option<f64>, Option<f64>, Option<f64>, f64), String> {
        let mut scenario = template.with_wall_height(height).map_err(|e| e.to_string())?;
        scenario.apply(overrides);
        if column.theta_max_deg.is_some() {
            scenario.profile.theta_max_deg = column.theta_max_deg;
        }
        let resolved = scenario.resolve(base).map_err(|e| e.to_string())?;
        let theta = resolved.scenario.profile.theta_max_deg;
        let result = plan(&resolved.plan_request(column.mode, None, Recording::default())).map_err(|e| e.to_string())?;
        let angle = match result.trajectory() {
            Some(t) => Some(audit(&resolved.model, t, &resolved.audit_limits()).map_err(|e| e.to_string())?.max_angle_deg),
            None => None,
        };
        Ok((theta, result.duration(), angle, result.solve_wall_seconds))
    };
    match attempt() {
        Ok((theta, t, angle, wall)) => {
            row.theta_max = theta;
            row.t_seconds = t;
            row.converged = t.is_some();
            row.max_angle = angle;
            row.wall_seconds = wall;
        }
        Err(e) => row.error = Some(e),
    }
    row
}

/// Plan every (height, mode) cell on a pool of `opts.jobs` workers and
/// write `sweep.csv`. Failed cells become rows with `converged = false`.
pub fn run_sweep(opts: &SweepOptions) -> Result<Vec<SweepRow>, CommandError> {
    let text = fs::read_to_string(&opts.template).map_err(|e| ScenarioError {
        field: String::new(),
        message: format!("cannot read {}: {e}", opts.template.display()),
    })?;
    let template = Scenario::from_json(&text)?;
    let base = opts.template.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    // Surface template errors once, before any work starts.
    let mut probe = template.with_wall_height(opts.heights.first().copied().unwrap_or(1.0))?;
    probe.apply(&opts.overrides);
    probe.resolve(&base)?;

    let cells: Vec<(f64, ModeSpec)> = opts
        .heights
        .iter()
        .flat_map(|&h| opts.modes.iter().map(move |&m| (h, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(run_err)?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(h, m)| sweep_cell(&template, &base, h, m, &opts.overrides))
            .collect()
    });

    fs::create_dir_all(&opts.out).map_err(run_err)?;
    write_sweep_csv(&opts.out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CommandError> {
    use std::io::Write;
    let mut w = create(path.to_path_buf())?;
    let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
    let mut body = String::from("height,mode,theta_max,T_seconds,converged,max_angle\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig9(r.height),
            r.mode,
            opt(r.theta_max),
            opt(r.t_seconds),
            r.converged,
            opt(r.max_angle)
        ));
    }
    w.write_all(body.as_bytes()).map_err(run_err)
}

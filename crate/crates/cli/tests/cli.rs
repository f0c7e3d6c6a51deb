//! End-to-end checks of the `carryplan` binary: exit codes, output files
//! and the sweep table.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carryplan_cli::scenario::Scenario;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn scene(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes").join(name)
}

fn carryplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carryplan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn malformed_json_exits_with_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"schema_version\": 1, ").unwrap();
    let out = carryplan(&["plan", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn unknown_field_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("open_swing.json")).unwrap();
    let text = text.replacen("\"t_step\"", "\"tstep\": 0.1, \"t_step\"", 1);
    let bad = dir.path().join("typo.json");
    std::fs::write(&bad, text).unwrap();
    let out = carryplan(&["plan", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("tstep"), "{}", stderr(&out));
}

#[test]
fn time_step_off_the_controller_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = carryplan(&[
        "plan",
        fixture("open_swing.json").to_str().unwrap(),
        "--t-step",
        "0.05",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn plan_writes_summary_trajectory_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = carryplan(&[
        "plan",
        fixture("open_swing.json").to_str().unwrap(),
        "--mode",
        "fit",
        "--dense",
        "4",
        "--trace",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in [
        "summary.json",
        "trajectory.csv",
        "trajectory_dense.csv",
        "audit.csv",
        "audit.json",
        "trace.json",
    ] {
        assert!(out_dir.join(file).is_file(), "missing {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "fit");
    assert_eq!(summary["converged"], true);
    let h = summary["H_best"].as_u64().unwrap() as f64;
    let t = summary["T_seconds"].as_f64().unwrap();
    assert_eq!(t, h * summary["t_step"].as_f64().unwrap());
    assert!(summary["per_H"].as_array().unwrap().len() >= 2);
    assert_eq!(summary["audit_passed"], true);

    let traj = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + h as usize + 1);
    let audit = std::fs::read_to_string(out_dir.join("audit.csv")).unwrap();
    assert_eq!(audit.lines().next().unwrap(), "t,ax,ay,az,angle_deg,mag,min_clearance");
}

#[test]
fn fixed_horizon_mode_requires_h() {
    let dir = tempfile::tempdir().unwrap();
    let out = carryplan(&[
        "plan",
        fixture("open_swing.json").to_str().unwrap(),
        "--mode",
        "j-gomp-at-H",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_ne!(code(&out), 0);
}

#[test]
fn horizon_too_short_is_a_planning_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = carryplan(&[
        "plan",
        fixture("open_swing.json").to_str().unwrap(),
        "--mode",
        "j-gomp-at-H",
        "--H",
        "3",
        "--no-audit",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], false);
    assert!(summary["H_best"].is_null());
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = carryplan(&[
        "sweep",
        fixture("far_wall.json").to_str().unwrap(),
        "--heights",
        "0.05,0.1",
        "--modes",
        "fit45,j-gomp",
        "--jobs",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "height,mode,theta_max,T_seconds,converged,max_angle");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.contains(",true,")), "{csv}");
}

#[test]
fn sweep_template_needs_a_wall() {
    let dir = tempfile::tempdir().unwrap();
    let out = carryplan(&[
        "sweep",
        fixture("open_swing.json").to_str().unwrap(),
        "--heights",
        "0.1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn shipped_scenarios_round_trip_through_canonical_json() {
    for name in ["wall_0.9.json", "wall_0.1.json", "wall_0.9_2g.json"] {
        let text = std::fs::read_to_string(scene(name)).unwrap();
        let parsed = Scenario::from_json(&text).unwrap();
        let again = Scenario::from_json(&parsed.to_canonical_json()).unwrap();
        assert_eq!(parsed, again, "{name}");
        Scenario::load(&scene(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use carryplan::planner::PlanMode;
use carryplan_cli::commands::{exit, run_plan, run_sweep, ModeSpec, PlanOptions, SweepOptions};
use carryplan_cli::scenario::Overrides;
use clap::{Args, Parser, Subcommand};

/// Time-minimized transport of open-top and fragile payloads.
#[derive(Parser)]
#[command(name = "carryplan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan one scenario, audit the result and write it to --out.
    Plan(PlanArgs),
    /// Plan every (wall height, mode) pair of a template scenario.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Shared {
    /// Cone half-angle (deg).
    #[arg(long = "theta-max")]
    theta_max: Option<f64>,
    /// Acceleration magnitude cap (m/s^2).
    #[arg(long = "a-max")]
    a_max: Option<f64>,
    /// Time step (s); must be a multiple of the controller period.
    #[arg(long = "t-step")]
    t_step: Option<f64>,
    /// Recorded in the summary; planning itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Shared {
    fn overrides(&self) -> Overrides {
        Overrides {
            theta_max_deg: self.theta_max,
            a_max: self.a_max,
            t_step: self.t_step,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    scenario: PathBuf,
    /// fit, j-gomp, gomp, fit-at-H, j-gomp-at-H or gomp-at-H.
    #[arg(long, default_value = "fit")]
    mode: PlanMode,
    /// Horizon for the fixed-horizon modes.
    #[arg(long = "H")]
    horizon: Option<usize>,
    /// Also write the trajectory resampled N times per step.
    #[arg(long, value_name = "N")]
    dense: Option<usize>,
    /// Write the optimizer iteration trace of the returned solve.
    #[arg(long)]
    trace: bool,
    /// Skip the audit; the exit code then reflects planning only.
    #[arg(long = "no-audit")]
    no_audit: bool,
    /// Write every QP subproblem as Matrix-Market files into this directory.
    #[arg(long = "dump-qp", value_name = "DIR")]
    dump_qp: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario containing a box named `wall`.
    template: PathBuf,
    /// Wall heights above the wall base (m).
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    heights: Vec<f64>,
    /// Modes, with the cone angle appended for fit (e.g. fit45).
    #[arg(long, value_delimiter = ',', default_value = "fit45,fit15,j-gomp")]
    modes: Vec<ModeSpec>,
    /// Worker threads.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    #[command(flatten)]
    shared: Shared,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Plan(args) => plan(args),
        Command::Sweep(args) => sweep(args),
    };
    ExitCode::from(code as u8)
}

fn plan(args: PlanArgs) -> i32 {
    let opts = PlanOptions {
        scenario: args.scenario,
        mode: args.mode,
        overrides: args.shared.overrides(),
        horizon: args.horizon,
        dense: args.dense,
        trace: args.trace,
        audit: !args.no_audit,
        seed: args.shared.seed,
        out: args.shared.out,
        dump_qp: args.dump_qp,
    };
    match run_plan(&opts) {
        Ok(outcome) => {
            let s = &outcome.summary;
            match (s.plan.h_best, s.plan.t_seconds) {
                (Some(h), Some(t)) => println!("mode {} H_best {h} T {t:.3} s", s.plan.mode),
                _ => println!("mode {}: no horizon converged", s.plan.mode),
            }
            if let Some(r) = &outcome.audit {
                println!(
                    "audit {}: max angle {:.2} deg, max |a| {:.2} m/s^2, IE {:.3}, IVE {}",
                    if r.passed { "pass" } else { "FAIL" },
                    r.max_angle_deg,
                    r.max_magnitude,
                    r.ie,
                    r.ive.map_or("-".into(), |v| format!("{v:.3}"))
                );
            }
            println!("wrote {}", opts.out.display());
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn sweep(args: SweepArgs) -> i32 {
    let opts = SweepOptions {
        template: args.template,
        heights: args.heights,
        modes: args.modes,
        overrides: args.shared.overrides(),
        jobs: args.jobs,
        out: args.shared.out,
    };
    match run_sweep(&opts) {
        Ok(rows) => {
            for r in &rows {
                if let Some(e) = &r.error {
                    eprintln!("height {} mode {}: {e}", r.height, r.mode);
                }
            }
            let ok = rows.iter().filter(|r| r.converged).count();
            println!("{ok}/{} cells converged; wrote {}", rows.len(), opts.out.join("sweep.csv").display());
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end: argument parsing, dispatch and output files.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::{convergence_experiment, scheme_convergence, stability_experiment_with};
use crate::io::{cloud_to_csv, fmt_f64, read_cloud_csv, write_atomic, CsvTable};
use crate::meanfield::simulate_sigma2;
use crate::micro::{simulate_sigma1, VehicleClass};
use crate::scenario::{load_scenario, Mode, ScenarioFile, ScenarioKind};
use crate::transport::{gw11_with, GroundMetric};

const SCHEMA_HELP: &str = r#"SCENARIO FILES
  A scenario is one JSON object. Unknown fields are rejected and every
  problem is reported with its field path.

  Common fields
    version   1 (required)
    mode      micro | meanfield | converge | stability | scheme-order | dist
    seed      unsigned integer, default 0 (drives the initial discretization)
    params    object (all modes except dist):
      alpha, beta, eps0, delta_lc, v_max, d_mid, p_max, a_ref   > 0
      u_max >= 0, n_tau >= 1, horizon_T > 0, m_lanes >= 1
      gw_a, gw_b  > 0, default 1 (weights of the distance used in reports)

  micro
    vehicles  [{id, class: "human"|"autonomous", lane, x, v, timer0,
               control: {breakpoints: [0, ...], values: [...]}}]
              control is required for autonomous vehicles only;
              initial timers must be pairwise distinct and in [0, horizon_T/n_tau)
    dt_max    integrator step bound
    sample_dt sampling interval for trajectory.csv
    -> trajectory.csv (t,id,class,lane,x,v), events.csv (t,id,from,to)

  meanfield
    scheme    {k_dyadic, dt_max, eps_mass = 1e-10, grid_h = 0}
    lanes     one entry per lane: {density, atoms} or {cloud_csv: "file.csv"}
              density: {kind: "uniform-box", x_min, x_max, v_min, v_max, mass}
                    or {kind: "truncated-gaussian", mean: [x, v],
                        cov: [[sxx, sxv], [sxv, svv]], radius, mass}
              cloud CSV files have the header x,v,mass
    avs       optional [{id, lane, y, w, timer0, control}]
    sample_dt sampling interval
    -> cloud_t<index>_lane<j>.csv, avs.csv (t,id,lane,y,w),
       mass_balance.csv, events.csv

  converge
    scheme, lanes (density only, mass 1), avs, dt_max (microscopic step),
    n_ref (mean-field atoms per lane), Ns (humans per lane, increasing),
    times (sample times)
    -> converge_report.csv

  stability
    scheme, lanes (density only), avs, n_ref, deltas (decreasing), times,
    perturbation (translate | velocity, default translate)
    -> stability_report.csv

  scheme-order
    scheme, lanes (density only), avs, n_ref, k_list (nondecreasing)
    -> scheme_report.csv

  dist
    cloud_a, cloud_b  cloud CSV paths (relative to the scenario file)
    a, b              distance weights, default 1
    velocity_weight   ground metric weight on velocity, default 1
    write_plan        optional path of the transport plan CSV (relative to --out-dir)
    -> the distance on standard output

EXIT STATUS
  0 success, 1 invalid input, 2 numerical failure.
  Experiment subcommands print one PASS/FAIL line; SIMTRAFFIC_THREADS
  caps their parallelism."#;

#[derive(Debug, Parser)]
#[command(name = "simtraffic", version, about = "Multi-lane hybrid traffic simulation", after_long_help = SCHEMA_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the microscopic system.
    Micro(Common),
    /// Simulate the mean-field system.
    Meanfield(Common),
    /// Microscopic to mean-field convergence trend.
    Converge(Common),
    /// Sensitivity of the mean-field system to its initial data.
    Stability(Common),
    /// Self-convergence of the mean-field scheme.
    SchemeOrder(Common),
    /// Generalized Wasserstein distance between two clouds.
    Dist(DistArgs),
}

#[derive(Debug, Args)]
pub struct DistArgs {
    /// First cloud CSV (x,v,mass).
    pub cloud_a: Option<PathBuf>,
    /// Second cloud CSV.
    pub cloud_b: Option<PathBuf>,
    /// Scenario JSON in dist mode, instead of the positional clouds.
    #[arg(long, conflicts_with_all = ["cloud_a", "cloud_b"])]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    /// Write the optimal plan to this CSV file.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Parse `args`, run, and return the exit status.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn load_for(mode: Mode, path: &Path) -> Result<ScenarioFile> {
    let s = load_scenario(path)?;
    if s.mode() != mode {
        let mut v = crate::error::ValidationErrors::default();
        v.push(
            "mode",
            format!("scenario is '{}' but subcommand is '{}'", s.mode().name(), mode.name()),
        );
        return Err(Error::Validation(v));
    }
    Ok(s)
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let (mode, common) = match cli.command {
        Command::Micro(c) => (Mode::Micro, c),
        Command::Meanfield(c) => (Mode::MeanField, c),
        Command::Converge(c) => (Mode::Converge, c),
        Command::Stability(c) => (Mode::Stability, c),
        Command::SchemeOrder(c) => (Mode::SchemeOrder, c),
        Command::Dist(d) => return run_dist_args(d, out),
    };
    let scenario = load_for(mode, &common.scenario)?;
    run(&scenario, &common.out_dir, out, err)
}

fn run_dist_args(d: DistArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &d.scenario {
        let s = load_for(Mode::Dist, path)?;
        return run(&s, &d.out_dir, out, &mut std::io::sink());
    }
    let (Some(pa), Some(pb)) = (&d.cloud_a, &d.cloud_b) else {
        let mut v = crate::error::ValidationErrors::default();
        v.push("cloud_a", "give two cloud files or --scenario");
        return Err(Error::Validation(v));
    };
    let a = read_cloud_csv(pa).map_err(|e| as_validation(pa, e))?;
    let b = read_cloud_csv(pb).map_err(|e| as_validation(pb, e))?;
    if !(d.a > 0.0 && d.b > 0.0) {
        let mut v = crate::error::ValidationErrors::default();
        v.push("a", "weights must be > 0");
        return Err(Error::Validation(v));
    }
    let plan = d.plan.map(|p| d.out_dir.join(p));
    dist(&a, &b, d.a, d.b, GroundMetric::default(), plan.as_deref(), out)
}

fn as_validation(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Parse {
            path: path.display().to_string(),
            reason: io.to_string(),
        },
        other => other,
    }
}

fn dist(
    a: &crate::measures::ParticleCloud,
    b: &crate::measures::ParticleCloud,
    wa: f64,
    wb: f64,
    metric: GroundMetric,
    plan_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (d, plan) = gw11_with(a, b, wa, wb, metric)?;
    if let Some(p) = plan_path {
        write_atomic(p, &plan.to_csv())?;
    }
    writeln!(out, "{}", fmt_f64(d))?;
    Ok(())
}

/// Execute a loaded scenario, writing its outputs under `out_dir`.
pub fn run(scenario: &ScenarioFile, out_dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &scenario.kind {
        ScenarioKind::Micro {
            state,
            dt_max,
            sample_dt,
        } => {
            let log = simulate_sigma1(state, *dt_max, *sample_dt)?;
            let mut traj = CsvTable::new(&["t", "id", "class", "lane", "x", "v"]);
            for s in &log.samples {
                for v in &s.vehicles {
                    let class = match v.class {
                        VehicleClass::Human => "human",
                        VehicleClass::Autonomous => "autonomous",
                    };
                    traj.row([
                        fmt_f64(s.t),
                        v.id.to_string(),
                        class.into(),
                        v.lane.to_string(),
                        fmt_f64(v.x),
                        fmt_f64(v.v),
                    ]);
                }
            }
            let mut events = CsvTable::new(&["t", "id", "from", "to"]);
            for e in &log.events {
                events.row([fmt_f64(e.t), e.id.to_string(), e.from.to_string(), e.to.to_string()]);
            }
            for w in &log.warnings {
                writeln!(
                    err,
                    "warning: t = {} vehicle {} to lane {}: {}",
                    fmt_f64(w.t),
                    w.id,
                    w.target,
                    w.reason
                )?;
            }
            write_atomic(&out_dir.join("trajectory.csv"), &traj.into_string())?;
            write_atomic(&out_dir.join("events.csv"), &events.into_string())?;
            writeln!(
                out,
                "micro: {} samples, {} timer events",
                log.samples.len(),
                log.events.len()
            )?;
        }
        ScenarioKind::MeanField {
            state,
            scheme,
            sample_dt,
        } => {
            let times = crate::micro::uniform_times(state.time, state.params().horizon_t, *sample_dt);
            let traj = simulate_sigma2(state, scheme, &times)?;
            let mut avs = CsvTable::new(&["t", "id", "lane", "y", "w"]);
            for (idx, s) in traj.samples.iter().enumerate() {
                for (j, c) in s.lanes.iter().enumerate() {
                    write_atomic(
                        &out_dir.join(format!("cloud_t{idx:04}_lane{}.csv", j + 1)),
                        &cloud_to_csv(c),
                    )?;
                }
                for a in &s.avs {
                    avs.row([
                        fmt_f64(s.t),
                        a.id.to_string(),
                        a.lane.to_string(),
                        fmt_f64(a.y),
                        fmt_f64(a.w),
                    ]);
                }
            }
            let mut mass = CsvTable::new(&[
                "t_start",
                "h",
                "lane",
                "mass_before",
                "outflow",
                "inflow",
                "mass_after",
                "pruned",
                "atoms",
            ]);
            for r in &traj.steps {
                for j in 0..r.mass_before.len() {
                    mass.row([
                        fmt_f64(r.t_start),
                        fmt_f64(r.h),
                        (j + 1).to_string(),
                        fmt_f64(r.mass_before[j]),
                        fmt_f64(r.outflow[j]),
                        fmt_f64(r.inflow[j]),
                        fmt_f64(r.mass_after[j]),
                        fmt_f64(r.pruned[j]),
                        r.atoms[j].to_string(),
                    ]);
                }
            }
            let mut events = CsvTable::new(&["t", "id", "from", "to"]);
            for e in &traj.events {
                events.row([fmt_f64(e.t), e.id.to_string(), e.from.to_string(), e.to.to_string()]);
            }
            write_atomic(&out_dir.join("avs.csv"), &avs.into_string())?;
            write_atomic(&out_dir.join("mass_balance.csv"), &mass.into_string())?;
            write_atomic(&out_dir.join("events.csv"), &events.into_string())?;
            writeln!(
                out,
                "meanfield: {} samples, {} steps, final mass {}",
                traj.samples.len(),
                traj.steps.len(),
                fmt_f64(traj.final_state.total_mass())
            )?;
        }
        ScenarioKind::Converge { setup, ns, times } => {
            let report = convergence_experiment(setup, ns, times)?;
            write_atomic(&out_dir.join("converge_report.csv"), &report.to_csv())?;
            writeln!(
                out,
                "{} converge: {:.3} of cells nonincreasing in N (need {:.2})",
                verdict(report.passed()),
                report.pass_fraction(),
                report.required_fraction
            )?;
        }
        ScenarioKind::Stability {
            setup,
            deltas,
            times,
            perturbation,
        } => {
            let report = stability_experiment_with(setup, deltas, times, *perturbation)?;
            write_atomic(&out_dir.join("stability_report.csv"), &report.to_csv())?;
            writeln!(
                out,
                "{} stability: worst ratio spread {:.4} (limit {:.2})",
                verdict(report.passed()),
                report.worst_spread(),
                1.0 + report.tolerance
            )?;
        }
        ScenarioKind::SchemeOrder { setup, k_list } => {
            let report = scheme_convergence(setup, k_list)?;
            write_atomic(&out_dir.join("scheme_report.csv"), &report.to_csv())?;
            let ratios: Vec<String> = report.ratios().iter().map(|r| format!("{r:.3}")).collect();
            writeln!(
                out,
                "{} scheme-order: gap ratios [{}] (range {}..{})",
                verdict(report.passed()),
                ratios.join(", "),
                report.ratio_range.0,
                report.ratio_range.1
            )?;
        }
        ScenarioKind::Dist {
            cloud_a,
            cloud_b,
            a,
            b,
            metric,
            write_plan,
        } => {
            let plan = write_plan
                .as_ref()
                .map(|p| if p.is_absolute() { p.clone() } else { out_dir.join(p) });
            dist(cloud_a, cloud_b, *a, *b, *metric, plan.as_deref(), out)?;
        }
    }
    Ok(())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

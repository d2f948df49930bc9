//! Batch command-line entry point: verification, synthesis, topology checks,
//! and closed-loop simulation, with reproducible file outputs.
//!
//! Result payloads are byte-deterministic for identical inputs; wall-clock
//! metadata goes to a separate `<out>.meta.json` file. Exit codes: 0 on
//! success, 2 when a verification/synthesis/connectivity check reports a
//! negative outcome (the result file is still written), 1 on errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::conditions::{
    synthesize, verify, Outcome, QForm, SynthConfig, SynthMode, VerifyConfig, VerifyInput,
};
use crate::files::ProblemFile;
use crate::graph::SwitchingSchedule;
use crate::poly::PolyVector;
use crate::sdp::SdpSettings;
use crate::sim::{consensus_time, integrate, lyapunov_trace, write_csv, SimInitial, SimPolys};

#[derive(Parser)]
#[command(
    name = "consensus-sos",
    version,
    about = "Synthesis, verification, and simulation of polynomial consensus certificates under switching topologies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Single solve with the coupling held fixed.
    Fixed,
    /// Alternate between Lyapunov and coupling solves.
    Alternate,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the problem file's polynomials against the consensus
    /// conditions and write the certificate bundle.
    Verify {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the compiled semidefinite program in plain-text form.
        #[arg(long)]
        dump_sdp: Option<PathBuf>,
        /// Override the gradient-symmetry tolerance from the problem file.
        #[arg(long)]
        a42_tol: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Synthesize a Lyapunov function (and coupling) for the problem's
    /// coupling form.
    Synth {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        order: Option<u8>,
        #[arg(long = "deg-v")]
        deg_v: u32,
        /// Coupling template degree for alternate rounds.
        #[arg(long = "deg-h", default_value_t = 3)]
        deg_h: u32,
        #[arg(long, value_enum, default_value = "fixed")]
        mode: ModeArg,
        #[arg(long, default_value_t = 4)]
        max_rounds: usize,
        /// Use the problem file's coupling (h or h2) as the fixed coupling
        /// instead of the identity seed.
        #[arg(long, default_value_t = false)]
        coupling_from_file: bool,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Integrate the closed loop over the switching schedule and write the
    /// trajectory CSV.
    Simulate {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        dt: f64,
        #[arg(long = "t-final", default_value_t = 10.0)]
        t_final: f64,
        /// Optional JSON summary (final error norms, consensus time).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Threshold for the reported consensus time.
        #[arg(long, default_value_t = 1e-2)]
        epsilon: f64,
    },
    /// Topology queries on a switching schedule.
    Topology {
        #[command(subcommand)]
        cmd: TopologyCmd,
    },
}

#[derive(Subcommand)]
enum TopologyCmd {
    /// Check joint connectivity of every window; exit 2 if any window fails.
    Check {
        /// Problem file carrying the schedule (or a bare schedule JSON).
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes, bad usage is not.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let (code, meta_target) = match &cli.command {
        Command::Verify { problem, out, dump_sdp, a42_tol, tol, max_iter } => (
            run_verify(problem, out, dump_sdp.as_deref(), *a42_tol, *tol, *max_iter),
            Some(out.clone()),
        ),
        Command::Synth {
            problem,
            out,
            order,
            deg_v,
            deg_h,
            mode,
            max_rounds,
            coupling_from_file,
            tol,
            max_iter,
        } => (
            run_synth(
                problem,
                out,
                *order,
                *deg_v,
                *deg_h,
                *mode,
                *max_rounds,
                *coupling_from_file,
                *tol,
                *max_iter,
            ),
            Some(out.clone()),
        ),
        Command::Simulate { problem, out, dt, t_final, summary, epsilon } => (
            run_simulate(problem, out, *dt, *t_final, summary.as_deref(), *epsilon),
            Some(out.clone()),
        ),
        Command::Topology { cmd: TopologyCmd::Check { problem, out } } => {
            (run_topology_check(problem, out.as_deref()), out.clone())
        }
    };
    let code = match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    if let Some(target) = meta_target {
        let _ = write_meta(&target, started.elapsed().as_secs_f64());
    }
    code
}

#[derive(Serialize)]
struct Meta<'a> {
    tool: &'a str,
    version: &'a str,
    duration_seconds: f64,
}

fn write_meta(out: &Path, duration_seconds: f64) -> std::io::Result<()> {
    let meta = Meta {
        tool: "consensus-sos",
        version: env!("CARGO_PKG_VERSION"),
        duration_seconds,
    };
    let mut path = out.as_os_str().to_owned();
    path.push(".meta.json");
    std::fs::write(PathBuf::from(path), serde_json::to_string_pretty(&meta).unwrap() + "\n")
}

type CmdResult = Result<i32, Box<dyn std::error::Error>>;

fn load_problem(path: &Path) -> Result<ProblemFile, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(ProblemFile::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap() + "\n")
}

fn problem_qform(p: &ProblemFile) -> Result<QForm, Box<dyn std::error::Error>> {
    Ok(QForm::from_exponents(p.vars, &p.qhat, p.exponent_2m)?)
}

fn poly_vector(
    entries: &Option<Vec<crate::poly::Polynomial>>,
    what: &str,
) -> Result<PolyVector, Box<dyn std::error::Error>> {
    let v = entries.clone().ok_or_else(|| format!("problem file lacks \"{what}\""))?;
    Ok(PolyVector::new(v)?)
}

fn settings_with(tol: Option<f64>, max_iter: Option<usize>) -> SdpSettings {
    let mut s = SdpSettings::default();
    if let Some(t) = tol {
        s.tol = t;
    }
    if let Some(m) = max_iter {
        s.max_iter = m;
    }
    s
}

fn run_verify(
    problem: &Path,
    out: &Path,
    dump: Option<&Path>,
    a42_tol: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
) -> CmdResult {
    let p = load_problem(problem)?;
    let qf = problem_qform(&p)?;
    let v = p.v.clone().ok_or("problem file lacks \"v\"")?;
    let input = match p.order {
        1 => VerifyInput::FirstOrder { v, h: poly_vector(&p.h, "h")? },
        2 => VerifyInput::SecondOrder {
            v,
            h1: poly_vector(&p.h1, "h1")?,
            h2: poly_vector(&p.h2, "h2")?,
        },
        other => return Err(format!("unsupported order {other}").into()),
    };
    let config = VerifyConfig {
        a42_tol: a42_tol.or(p.a42_tol).unwrap_or(1e-8),
        sdp: settings_with(tol, max_iter),
        ..VerifyConfig::default()
    };
    if let Some(dump_path) = dump {
        // Rebuild the same program the verifier solves and dump it.
        let text = crate::conditions::dump_verify_problem(&input, &qf, &config)?;
        std::fs::write(dump_path, text)?;
    }
    let report = verify(&input, &qf, &config)?;
    write_json(out, &report)?;
    match report.outcome {
        Outcome::Failed(_) => Ok(2),
        _ => Ok(0),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_synth(
    problem: &Path,
    out: &Path,
    order: Option<u8>,
    deg_v: u32,
    deg_h: u32,
    mode: ModeArg,
    max_rounds: usize,
    coupling_from_file: bool,
    tol: Option<f64>,
    max_iter: Option<usize>,
) -> CmdResult {
    let p = load_problem(problem)?;
    let qf = problem_qform(&p)?;
    let order = order.unwrap_or(p.order);
    let mut config = SynthConfig::new(order, deg_v);
    config.coupling_degree = deg_h;
    config.mode = match mode {
        ModeArg::Fixed => SynthMode::FixedCoupling,
        ModeArg::Alternate => SynthMode::Alternate { max_rounds },
    };
    config.sdp = settings_with(tol, max_iter);
    if coupling_from_file {
        let coupling = match order {
            1 => poly_vector(&p.h, "h")?,
            _ => poly_vector(&p.h2, "h2")?,
        };
        config.coupling = Some(coupling);
    }
    let result = synthesize(&qf, &config)?;
    write_json(out, &result)?;
    match result.outcome {
        Outcome::Failed(_) => Ok(2),
        _ => Ok(0),
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    final_position_error_norms: Vec<f64>,
    final_velocity_error_norms: Vec<f64>,
    consensus_time: Option<f64>,
    epsilon: f64,
    steps: usize,
    switches: usize,
}

fn run_simulate(
    problem: &Path,
    out: &Path,
    dt: f64,
    t_final: f64,
    summary: Option<&Path>,
    epsilon: f64,
) -> CmdResult {
    let p = load_problem(problem)?;
    let schedule = p.schedule.clone().ok_or("problem file lacks \"schedule\"")?;
    let (initial, polys) = match p.order {
        1 => {
            let z = p.initial_positions.clone().ok_or("problem file lacks \"initial_positions\"")?;
            let z_ref = p.leader_position.clone().ok_or("problem file lacks \"leader_position\"")?;
            (
                SimInitial::FirstOrder { z, z_ref },
                SimPolys::FirstOrder { h: poly_vector(&p.h, "h")? },
            )
        }
        2 => {
            let z = p.initial_positions.clone().ok_or("problem file lacks \"initial_positions\"")?;
            let v = p.initial_velocities.clone().ok_or("problem file lacks \"initial_velocities\"")?;
            let z_ref = p.leader_position.clone().ok_or("problem file lacks \"leader_position\"")?;
            let v_ref = p.leader_velocity.clone().ok_or("problem file lacks \"leader_velocity\"")?;
            let omega = z
                .iter()
                .map(|zi| zi.iter().zip(&z_ref).map(|(a, b)| a - b).collect())
                .collect();
            let nu = v
                .iter()
                .map(|vi| vi.iter().zip(&v_ref).map(|(a, b)| a - b).collect())
                .collect();
            (
                SimInitial::SecondOrder { omega, nu, v_ref },
                SimPolys::SecondOrder {
                    h1: poly_vector(&p.h1, "h1")?,
                    h2: poly_vector(&p.h2, "h2")?,
                },
            )
        }
        other => return Err(format!("unsupported order {other}").into()),
    };
    let result = integrate(&schedule, &initial, &polys, dt, t_final)?;
    let lyap = match &p.v {
        Some(v) => lyapunov_trace(&result, v, &schedule)?,
        None => vec![0.0; result.times.len()],
    };
    let mut buf = Vec::new();
    write_csv(&result, &lyap, &mut buf)?;
    std::fs::write(out, buf)?;
    if let Some(summary_path) = summary {
        let s = SimulateSummary {
            final_position_error_norms: result.position_error_norms.last().cloned().unwrap_or_default(),
            final_velocity_error_norms: result.velocity_error_norms.last().cloned().unwrap_or_default(),
            consensus_time: consensus_time(&result, epsilon),
            epsilon,
            steps: result.times.len(),
            switches: result.switch_events.len(),
        };
        write_json(summary_path, &s)?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct WindowReport {
    index: usize,
    jointly_connected: bool,
}

#[derive(Serialize)]
struct TopologyReport {
    followers: usize,
    graphs: usize,
    windows: Vec<WindowReport>,
    all_jointly_connected: bool,
}

fn run_topology_check(problem: &Path, out: Option<&Path>) -> CmdResult {
    let text = std::fs::read_to_string(problem)
        .map_err(|e| format!("cannot read {}: {e}", problem.display()))?;
    // Accept either a problem file with a schedule or a bare schedule JSON.
    let schedule: SwitchingSchedule = match ProblemFile::from_json(&text) {
        Ok(p) if p.schedule.is_some() => p.schedule.unwrap(),
        _ => serde_json::from_str(&text).map_err(|e| format!("{}: {e}", problem.display()))?,
    };
    let mut windows = Vec::new();
    let mut all = true;
    for w in 0..schedule.window_count() {
        let ok = schedule.is_jointly_connected(w)?;
        all &= ok;
        windows.push(WindowReport { index: w, jointly_connected: ok });
    }
    let report = TopologyReport {
        followers: schedule.follower_count(),
        graphs: schedule.graphs().len(),
        windows,
        all_jointly_connected: all,
    };
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
    }
    Ok(if all { 0 } else { 2 })
}

//! `gnss-odo`: simulate RINEX data, estimate carrier-phase odometry and
//! evaluate trajectories.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 estimation failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gnss_odometry::eval::{ate, dd_residual_series, dd_spread, write_dd_csv};
use gnss_odometry::gnss::SatId;
use gnss_odometry::odometry::{
    estimate_trajectory, read_trajectory_csv, write_report, write_slips_csv, write_trajectory_csv, Method,
    MethodConfig, OdometryError, Session,
};
use gnss_odometry::rinex::{parse_nav, parse_obs_with, CodePreferences};
use gnss_odometry::sim::{builtin_scenario, simulate, write_simulation, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "gnss-odo",
    version,
    about = "Carrier-phase odometry with cycle-slip estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a trajectory from a RINEX observation/navigation pair.
    Process(ProcessArgs),
    /// Generate RINEX files and ground truth from a scenario.
    Simulate(SimulateArgs),
    /// Compare a trajectory with ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    nav: PathBuf,
    /// slip, huber or switchable; overrides the config file.
    #[arg(long)]
    method: Option<Method>,
    /// JSON file with estimator settings (any subset of fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Builtin scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also compute double-difference TDCP residuals (needs --ref-sat,
    /// --obs and --nav); the truth's first position is the static position.
    #[arg(long)]
    residuals: bool,
    #[arg(long)]
    ref_sat: Option<SatId>,
    #[arg(long)]
    obs: Option<PathBuf>,
    #[arg(long)]
    nav: Option<PathBuf>,
    /// Epoch separations for the residual table (s).
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<f64>>,
    /// Estimator settings whose TDCP section is used for the residuals.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for ate.json and dd_residuals.csv; the report is printed
    /// either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config file layout: estimator settings plus RINEX code preferences.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    method: MethodConfig,
    #[serde(default)]
    code_preferences: CodePreferences,
}

enum Failure {
    Input(anyhow::Error),
    Estimation(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Process(a) => process(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Estimation(e)) => {
            eprintln!("estimation failed: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_session(obs: &Path, nav: &Path, prefs: &CodePreferences) -> anyhow::Result<Session> {
    let open = |p: &Path| {
        File::open(p)
            .map(BufReader::new)
            .with_context(|| format!("opening {}", p.display()))
    };
    let nav_file = parse_nav(open(nav)?).with_context(|| format!("parsing {}", nav.display()))?;
    let channels: BTreeMap<SatId, i8> = nav_file
        .store
        .satellites()
        .filter_map(|s| nav_file.store.glonass_channel(s).map(|c| (s, c)))
        .collect();
    let obs_file =
        parse_obs_with(open(obs)?, prefs, &channels).with_context(|| format!("parsing {}", obs.display()))?;
    for (what, r) in [("navigation", &nav_file.report), ("observation", &obs_file.report)] {
        if r.warnings > 0 {
            log::warn!("{what} file: {} warnings", r.warnings);
            for m in &r.messages {
                log::debug!("{m}");
            }
        }
    }
    Ok(Session::new(obs_file.epochs, nav_file.store, nav_file.iono))
}

fn process(a: ProcessArgs) -> CmdResult {
    let file = load_config(a.config.as_deref())?;
    let mut cfg = file.method;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    let session = load_session(&a.obs, &a.nav, &file.code_preferences)?;
    log::info!("{} epochs, method {}", session.epochs.len(), cfg.method);
    let result = estimate_trajectory(&session, &cfg).map_err(|e| match e {
        OdometryError::InvalidConfig(_) | OdometryError::EmptySession | OdometryError::UnsortedEpochs(_) => {
            Failure::Input(e.into())
        }
        _ => Failure::Estimation(e.into()),
    })?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_trajectory_csv(&a.out.join("trajectory.csv"), &result.trajectory).map_err(anyhow::Error::from)?;
    write_slips_csv(&a.out.join("slips.csv"), &result.slips).map_err(anyhow::Error::from)?;
    write_report(&a.out.join("report.json"), &result.report).map_err(anyhow::Error::from)?;
    if result.report.failed {
        return Err(Failure::Estimation(anyhow!(
            "optimizer did not converge (converged {}, diverged {})",
            result.report.converged,
            result.report.diverged
        )));
    }
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> CmdResult {
    let mut scen = match builtin_scenario(&a.scenario) {
        Some(s) => s,
        None => {
            let p = Path::new(&a.scenario);
            if !p.exists() {
                return Err(anyhow!("{:?} is neither a builtin scenario nor a file", a.scenario).into());
            }
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ScenarioConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    if let Some(seed) = a.seed {
        scen.seed = seed;
    }
    let sim = simulate(&scen).map_err(anyhow::Error::from)?;
    let files = write_simulation(&sim, &scen, &a.out).map_err(anyhow::Error::from)?;
    let process = FileConfig {
        method: if sim.atmosphere {
            MethodConfig::default()
        } else {
            MethodConfig::default().without_atmosphere()
        },
        code_preferences: CodePreferences::default(),
    };
    let cfg_path = a.out.join("process_config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&process).expect("config serializes") + "\n",
    )
    .with_context(|| format!("writing {}", cfg_path.display()))?;
    std::fs::write(a.out.join("scenario.json"), scen.to_json() + "\n").context("writing scenario.json")?;
    log::info!("wrote {} and {}", files.obs.display(), files.nav.display());
    Ok(())
}

#[derive(Serialize)]
struct SpreadRow {
    dt: f64,
    std: f64,
}

/// Printed summary; the per-epoch series go to `ate.json`.
#[derive(Serialize)]
struct EvaluateSummary {
    rms: f64,
    max: f64,
    epochs: usize,
    alignment: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    dd_spread: Option<Vec<SpreadRow>>,
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let residual_inputs = if a.residuals {
        let sat = a.ref_sat.ok_or_else(|| anyhow!("--residuals requires --ref-sat"))?;
        let obs = a.obs.as_ref().ok_or_else(|| anyhow!("--residuals requires --obs"))?;
        let nav = a.nav.as_ref().ok_or_else(|| anyhow!("--residuals requires --nav"))?;
        Some((sat, obs, nav))
    } else {
        None
    };
    let traj = read_trajectory_csv(&a.traj).map_err(anyhow::Error::from)?;
    let truth = read_trajectory_csv(&a.truth).map_err(anyhow::Error::from)?;
    let report = ate(&traj, &truth).map_err(|e| anyhow!("{}: {e}", a.traj.display()))?;

    let mut spread = None;
    let mut rows = Vec::new();
    if let Some((sat, obs, nav)) = residual_inputs {
        let file = load_config(a.config.as_deref())?;
        let session = load_session(obs, nav, &file.code_preferences)?;
        let offsets = a.offsets.clone().unwrap_or_else(|| (1..=60).map(f64::from).collect());
        rows = dd_residual_series(&session, sat, &offsets, &truth.positions[0], &file.method.tdcp)
            .map_err(anyhow::Error::from)?;
        spread = Some(
            dd_spread(&rows)
                .into_iter()
                .map(|(dt, std)| SpreadRow { dt, std })
                .collect(),
        );
    }
    let text = serde_json::to_string_pretty(&EvaluateSummary {
        rms: report.rms,
        max: report.max,
        epochs: report.errors.len(),
        alignment: report.alignment,
        dd_spread: spread,
    })
    .expect("report serializes");
    println!("{text}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("ate.json"), report.to_json() + "\n").context("writing ate.json")?;
        if a.residuals {
            write_dd_csv(&dir.join("dd_residuals.csv"), &rows).map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

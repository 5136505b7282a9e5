//! `fipwc`: train, tune, simulate and evaluate pendulum controllers.
//!
//! Exit status is 0 on success, 2 for configuration or usage errors and 1
//! for failures while running.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fipwc::config::{Profile, RunConfig};
use fipwc::ddpg::{train, EpisodeLog};
use fipwc::montecarlo::{
    read_runs_csv, run_campaign, run_episode_traced, write_runs_csv, write_summary, CampaignResult,
    Controller, TraceRow, ZeroController,
};
use fipwc::pd::{read_gains, tune_gains, write_gains, PdController, PdSearchSpec};
use fipwc::stochastic::derive_seed;
use fipwc::{Agent, Env, Error};

const OUT_DIR_VAR: &str = "FIPWC_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "fipwc",
    version,
    about = "Flexible inverted pendulum on a cart: DDPG vs PD under disturbances"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and $FIPWC_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Switch off the cart-velocity disturbance everywhere.
    #[arg(long, global = true)]
    no_cart_disturbance: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a DDPG agent and write its checkpoint and episode log.
    Train {
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Environment steps between checkpoints (0 writes only the final one).
        #[arg(long, default_value_t = 10_000)]
        checkpoint_interval: usize,
    },
    /// Simulate episodes and write one trajectory CSV per episode.
    Simulate {
        #[arg(long, value_enum, default_value = "drl")]
        controller: ControllerArg,
        /// PD gains file (default: <out>/gains.toml).
        #[arg(long)]
        gains: Option<PathBuf>,
        /// Agent checkpoint (default: <out>/agent.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Monte Carlo campaigns over the PD/DRL × cart-disturbance cells.
    Campaign {
        /// Comma-separated subset of cells.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = Cell::ALL)]
        cells: Vec<Cell>,
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Runs per cell (overrides the config).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Grid-search PD gains on the configuration without cart disturbance.
    TunePd {
        /// Replace candidate lists, e.g. `kp_theta=-1,0,1;kd_z=0,1`.
        #[arg(long)]
        grid: Option<String>,
        /// Episodes scored per grid point (overrides the config).
        #[arg(long)]
        episodes: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Drl,
    Pd,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Cell {
    Drl,
    Pd,
    PdNoDz,
    DrlNoDz,
}

impl Cell {
    const ALL: [Cell; 4] = [Cell::Drl, Cell::Pd, Cell::PdNoDz, Cell::DrlNoDz];

    fn label(self) -> &'static str {
        match self {
            Cell::Drl => "drl",
            Cell::Pd => "pd",
            Cell::PdNoDz => "pd_no_dz",
            Cell::DrlNoDz => "drl_no_dz",
        }
    }

    fn row_name(self) -> &'static str {
        match self {
            Cell::Drl => "DRL",
            Cell::Pd => "PD",
            Cell::PdNoDz => "PD (no cart disturbance)",
            Cell::DrlNoDz => "DRL (no cart disturbance)",
        }
    }

    fn cart_disturbance(self) -> bool {
        matches!(self, Cell::Drl | Cell::Pd)
    }

    fn is_drl(self) -> bool {
        matches!(self, Cell::Drl | Cell::DrlNoDz)
    }
}

/// Failure split by exit status.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::InvalidParameter { .. }) => Failure::Config(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let profile = match cli.command {
        Command::Train {
            profile: ProfileArg::Paper,
            ..
        } => Profile::Paper,
        _ => Profile::Desk,
    };
    let mut config = RunConfig::load_with_profile(cli.global.config.as_deref(), profile)
        .map_err(Failure::from)?;
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
        config.campaign.master_seed = seed;
    }
    if cli.global.no_cart_disturbance {
        config.env.enable_cart_disturbance = false;
        config.campaign.enable_cart_disturbance = false;
    }
    let out = resolve_out_dir(cli.global.out.as_deref(), &config);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(Failure::Runtime)?;
    let workers = cli.global.workers;

    match cli.command {
        Command::Train {
            resume,
            checkpoint_interval,
            ..
        } => cmd_train(config, &out, resume.as_deref(), checkpoint_interval),
        Command::Simulate {
            controller,
            gains,
            checkpoint,
            episodes,
        } => cmd_simulate(config, &out, controller, gains, checkpoint, episodes),
        Command::Campaign {
            cells,
            gains,
            checkpoint,
            runs,
        } => {
            let cells: Vec<Cell> = if cli.global.no_cart_disturbance {
                cells
                    .into_iter()
                    .filter(|c| !c.cart_disturbance())
                    .collect()
            } else {
                cells
            };
            cmd_campaign(config, &out, &cells, gains, checkpoint, runs, workers)
        }
        Command::TunePd { grid, episodes } => {
            cmd_tune_pd(config, &out, grid.as_deref(), episodes, workers)
        }
    }
}

fn resolve_out_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn validated(config: RunConfig) -> Result<RunConfig, Failure> {
    config.validate()?;
    Ok(config)
}

fn write_echo(config: &RunConfig, out: &Path, command: &str) -> Result<(), Failure> {
    config.write_echo(&out.join(format!("{command}_config.toml")))?;
    Ok(())
}

fn cmd_train(
    config: RunConfig,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_interval: usize,
) -> Result<(), Failure> {
    let mut config = validated(config)?;
    let (mut agent, start_step) = match resume {
        Some(path) => {
            let (agent, steps) = Agent::load(path, config.seed)
                .with_context(|| format!("resuming from {}", path.display()))?;
            // The checkpoint's agent settings win so the run continues as it started.
            config.agent = agent.config().clone();
            (agent, steps as usize)
        }
        None => (
            Agent::new(config.agent.clone(), config.env.force_limit, config.seed)?,
            0,
        ),
    };
    write_echo(&config, out, "train")?;

    let log_path = out.join("train_log.csv");
    let log_file = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = csv::WriterBuilder::new()
        .has_headers(resume.is_none() || log_file.metadata().map(|m| m.len() == 0).unwrap_or(true))
        .from_writer(log_file);

    let ckpt_path = out.join("agent.ckpt");
    let mut env = Env::new(config.env.clone())?;
    let total = config.agent.total_train_steps;
    eprintln!("training {} steps from step {start_step}", total);
    let logs = train(
        &mut agent,
        &mut env,
        config.seed,
        start_step,
        checkpoint_interval,
        |entry: &EpisodeLog| {
            log.serialize(entry)?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            eprintln!(
                "step {:>7}  episode {:>4}  return {:>12.3}  eps {:.3}",
                entry.step, entry.episode, entry.episode_return, entry.epsilon
            );
            Ok(())
        },
        |agent, step| agent.save(&ckpt_path, step as u64),
    )?;
    agent.save(&ckpt_path, total.max(start_step) as u64)?;
    println!("episodes: {}", logs.len());
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn load_controller(
    kind: ControllerArg,
    config: &RunConfig,
    out: &Path,
    gains: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<Box<dyn Controller>, Failure> {
    Ok(match kind {
        ControllerArg::Zero => Box::new(ZeroController),
        ControllerArg::Pd => {
            let path = gains.unwrap_or_else(|| out.join("gains.toml"));
            let file = read_gains(&path)
                .map_err(|e| Failure::Runtime(anyhow!(e).context("loading PD gains")))?;
            Box::new(PdController {
                gains: file.gains(),
                force_limit: config.env.force_limit,
            })
        }
        ControllerArg::Drl => {
            let path = checkpoint.unwrap_or_else(|| out.join("agent.ckpt"));
            let (agent, _) = Agent::load(&path, config.seed)
                .map_err(|e| Failure::Runtime(anyhow!(e).context("loading agent checkpoint")))?;
            Box::new(agent.policy())
        }
    })
}

#[derive(Serialize)]
struct TrajectoryRow {
    step: usize,
    time: f64,
    z: f64,
    z_dot: f64,
    phi: f64,
    phi_dot: f64,
    theta: f64,
    theta_dot: f64,
    phi_deg: f64,
    phi_dot_deg: f64,
    theta_deg: f64,
    theta_dot_deg: f64,
    force: f64,
    d_z_dot: f64,
    d_phi_dot: f64,
    d_theta_dot: f64,
    reward: f64,
}

impl From<&TraceRow> for TrajectoryRow {
    fn from(t: &TraceRow) -> Self {
        let s = t.state;
        Self {
            step: t.step,
            time: t.time,
            z: s.z(),
            z_dot: s.z_dot(),
            phi: s.phi(),
            phi_dot: s.phi_dot(),
            theta: s.theta(),
            theta_dot: s.theta_dot(),
            phi_deg: s.phi().to_degrees(),
            phi_dot_deg: s.phi_dot().to_degrees(),
            theta_deg: s.theta().to_degrees(),
            theta_dot_deg: s.theta_dot().to_degrees(),
            force: t.force,
            d_z_dot: t.disturbances[0],
            d_phi_dot: t.disturbances[1],
            d_theta_dot: t.disturbances[2],
            reward: t.reward,
        }
    }
}

fn cmd_simulate(
    config: RunConfig,
    out: &Path,
    kind: ControllerArg,
    gains: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    episodes: usize,
) -> Result<(), Failure> {
    let config = validated(config)?;
    if episodes == 0 {
        return Err(Failure::Config(anyhow!("--episodes must be >= 1")));
    }
    let controller = load_controller(kind, &config, out, gains, checkpoint)?;
    write_echo(&config, out, "simulate")?;
    for i in 0..episodes {
        let seed = derive_seed(config.seed, i as u64);
        let path = out.join(format!("trajectory_{i:03}.csv"));
        let mut writer = csv::Writer::from_path(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        let result = run_episode_traced(controller.as_ref(), &config.env, seed, |row| {
            writer.serialize(TrajectoryRow::from(row))?;
            Ok(())
        })?;
        writer
            .flush()
            .with_context(|| format!("writing {}", path.display()))?;
        println!(
            "episode {i}: seed {seed} return {:.6} steps {} max|theta| {:.3} deg{}",
            result.episode_return,
            result.steps,
            result.max_abs_theta.to_degrees(),
            if result.violated {
                " (limit violated)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TableRow<'a> {
    controller: &'a str,
    cart_disturbance: bool,
    #[serde(rename = "Average")]
    average: f64,
    #[serde(rename = "Standard Deviation")]
    std: Option<f64>,
    n_runs: usize,
    violations: usize,
    failures: usize,
}

fn cmd_campaign(
    mut config: RunConfig,
    out: &Path,
    cells: &[Cell],
    gains: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    runs: Option<usize>,
    workers: usize,
) -> Result<(), Failure> {
    if let Some(n) = runs {
        config.campaign.n_runs = n;
    }
    let config = validated(config)?;
    if cells.is_empty() {
        return Err(Failure::Config(anyhow!("no campaign cells selected")));
    }
    let pd = if cells.iter().any(|c| !c.is_drl()) {
        Some(load_controller(
            ControllerArg::Pd,
            &config,
            out,
            gains,
            None,
        )?)
    } else {
        None
    };
    let drl = if cells.iter().any(|c| c.is_drl()) {
        Some(load_controller(
            ControllerArg::Drl,
            &config,
            out,
            None,
            checkpoint,
        )?)
    } else {
        None
    };
    write_echo(&config, out, "campaign")?;

    let table_path = out.join("campaign_table.csv");
    let mut table = csv::Writer::from_path(&table_path)
        .with_context(|| format!("creating {}", table_path.display()))?;
    println!("{:<28} {:>16} {:>20}", "", "Average", "Standard Deviation");
    for &cell in cells {
        let spec = fipwc::CampaignSpec {
            enable_cart_disturbance: cell.cart_disturbance(),
            ..config.campaign
        };
        let controller = if cell.is_drl() {
            drl.as_deref()
        } else {
            pd.as_deref()
        }
        .expect("controller loaded for every selected cell");
        let result = run_campaign(&spec, &config.env, controller, workers)?;
        let runs_path = out.join(format!("campaign_{}_runs.csv", cell.label()));
        write_runs_csv(&runs_path, &result.runs)?;
        write_summary(
            &out.join(format!("campaign_{}_summary.txt", cell.label())),
            cell.label(),
            &result,
        )?;
        check_recomputation(&runs_path, &result)?;
        for (index, message) in &result.failures {
            eprintln!("{}: run {index} failed: {message}", cell.label());
        }
        table
            .serialize(TableRow {
                controller: cell.row_name(),
                cart_disturbance: cell.cart_disturbance(),
                average: result.mean,
                std: result.std,
                n_runs: result.runs.len(),
                violations: result.violations,
                failures: result.failures.len(),
            })
            .context("writing campaign table")?;
        let std = result
            .std
            .map_or_else(|| "n/a".to_string(), |s| format!("{s:.2}"));
        println!("{:<28} {:>16.2} {:>20}", cell.row_name(), result.mean, std);
    }
    table.flush().context("writing campaign table")?;
    Ok(())
}

/// The persisted CSV must reproduce the reported statistics.
fn check_recomputation(runs_path: &Path, result: &CampaignResult) -> Result<(), Failure> {
    let runs = read_runs_csv(runs_path)?;
    let returns: Vec<f64> = runs.iter().map(|r| r.episode_return).collect();
    let (mean, _) = fipwc::montecarlo::mean_and_std(&returns);
    if (mean - result.mean).abs() > 1e-12 * result.mean.abs().max(1.0) {
        return Err(Failure::Runtime(anyhow!(
            "{}: recomputed mean {mean} differs from reported {}",
            runs_path.display(),
            result.mean
        )));
    }
    Ok(())
}

/// Applies `key=v1,v2;key=...` overrides to the search grid.
fn apply_grid_override(search: &mut PdSearchSpec, spec: &str) -> anyhow::Result<()> {
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("grid entry `{part}` is not key=values"))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("grid value `{v}` for {key}"))
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        let slot = match key.trim() {
            "kp_theta" => &mut search.kp_theta,
            "kd_theta" => &mut search.kd_theta,
            "kp_z" => &mut search.kp_z,
            "kd_z" => &mut search.kd_z,
            other => {
                bail!("unknown grid key `{other}` (expected kp_theta, kd_theta, kp_z or kd_z)")
            }
        };
        *slot = values;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    kp_theta: f64,
    kd_theta: f64,
    kp_z: f64,
    kd_z: f64,
    stabilizing: bool,
    mean_reward: Option<f64>,
}

fn cmd_tune_pd(
    mut config: RunConfig,
    out: &Path,
    grid: Option<&str>,
    episodes: Option<usize>,
    workers: usize,
) -> Result<(), Failure> {
    if let Some(spec) = grid {
        apply_grid_override(&mut config.pd, spec).map_err(Failure::Config)?;
    }
    if let Some(n) = episodes {
        config.pd.episodes = n;
    }
    let config = validated(config)?;
    write_echo(&config, out, "tune_pd")?;
    let result = tune_gains(&config.env, &config.pd, config.seed, workers)?;

    let scores_path = out.join("tune_scores.csv");
    let mut writer = csv::Writer::from_path(&scores_path)
        .with_context(|| format!("creating {}", scores_path.display()))?;
    for s in &result.scores {
        writer
            .serialize(ScoreRow {
                kp_theta: s.gains.kp_theta,
                kd_theta: s.gains.kd_theta,
                kp_z: s.gains.kp_z,
                kd_z: s.gains.kd_z,
                stabilizing: s.stabilizing,
                mean_reward: s.mean_reward,
            })
            .context("writing tuning scores")?;
    }
    writer.flush().context("writing tuning scores")?;
    let gains_path = out.join("gains.toml");
    write_gains(&gains_path, &result.gains, Some(result.mean_reward))?;
    let g = result.gains;
    println!(
        "kp_theta {} kd_theta {} kp_z {} kd_z {}: mean reward {:.4}",
        g.kp_theta, g.kd_theta, g.kp_z, g.kd_z, result.mean_reward
    );
    println!("gains: {}", gains_path.display());
    Ok(())
}

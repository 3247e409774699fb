use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pacnmpc::bench::{
    calibrate, env_path, environment_suite, read_jsonl, write_benchmark, write_csv, write_plot_data, write_trace_csv,
    BenchMode, Runner, TrialResult,
};
use pacnmpc::config::Config;
use pacnmpc::td3::{load_value_function, train, ValueFunction};
use pacnmpc::world::Environment;

#[derive(Parser)]
#[command(name = "pacnmpc", version, about = "PAC-bounded sampling NMPC with a learned terminal value function")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration; missing sections fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the actor-critic value function.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the environment-step cap.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Override the model wheelbase (m).
        #[arg(long)]
        wheelbase: Option<f64>,
    },
    /// Run every mode on a suite of seeded blocked environments.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of blocked environments (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated subset of QUADRATIC, LEARNED_VF, RAW_ACTOR.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<BenchMode>>,
        /// Samples per optimisation iteration (overrides the config).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare optimised bounds with fresh Monte Carlo estimates along
    /// closed-loop episodes.
    ValidateBounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Minimum number of planning intervals.
        #[arg(long)]
        intervals: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Re-execute a logged trial and dump its time series. The configuration
    /// defaults to the `config.json` stored next to the trial log.
    Replay {
        #[command(flatten)]
        common: Common,
        /// `trials.jsonl` written by `benchmark`.
        #[arg(long)]
        trials: PathBuf,
        /// Trial index to replay.
        #[arg(long)]
        trial: usize,
        #[arg(long)]
        mode: BenchMode,
        /// Environment file; defaults to the one stored next to the trial log.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn load_vf(cfg: &Config, checkpoint: Option<&PathBuf>) -> Result<Option<ValueFunction>> {
    checkpoint
        .map(|dir| load_value_function(dir, cfg.mdp()).with_context(|| format!("loading checkpoint {}", dir.display())))
        .transpose()
}

fn prepare_out(out: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Sizes the global worker pool from `PACNMPC_WORKERS` when set.
fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("PACNMPC_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("PACNMPC_WORKERS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_workers()?;
    match Cli::parse().command {
        Command::Train { common, max_steps, wheelbase } => {
            let mut cfg = load_config(common.config.as_ref())?;
            if let Some(n) = max_steps {
                cfg.td3.td3.max_steps = n;
            }
            if let Some(l) = wheelbase {
                cfg.dynamics.wheelbase = l;
            }
            cfg.validate()?;
            let setup = cfg.train_setup(common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let outcome = train(&setup, Some(&common.out))?;
            log::info!(
                "finished after {} steps ({:?}); recent goal rate {:.3}",
                outcome.meta.steps,
                outcome.meta.stop_reason,
                outcome.meta.recent_outcomes[0]
            );
        }
        Command::Benchmark { common, checkpoint, trials, modes, samples } => {
            let mut cfg = load_config(common.config.as_ref())?;
            if let Some(n) = trials {
                cfg.benchmark.trials = n;
            }
            if let Some(m) = modes {
                cfg.benchmark.modes = m;
            }
            if let Some(m) = samples {
                cfg.pac.optimizer.samples = m;
                cfg.pac.optimizer.mc_samples = m;
            }
            cfg.validate()?;
            let vf = load_vf(&cfg, checkpoint.as_ref())?;
            prepare_out(&common.out, &cfg)?;
            let b = &cfg.benchmark;
            let suite = environment_suite(common.seed, b.trials, &cfg.environment, cfg.dynamics.robot_radius, b.max_draws)?;
            let modes = b.modes.clone();
            let runner = Runner::new(cfg, vf);
            let runs = runner.run_suite(&suite, &modes)?;
            for m in write_benchmark(&common.out, &suite, &runs)? {
                log::info!(
                    "{}: {} trials, goal {:.3}, timeout {:.3}, obstacle {:.3}, velocity {:.3}, replan {:?} s",
                    m.mode.name(),
                    m.trials,
                    m.goal_rate,
                    m.timeout_rate,
                    m.obstacle_rate,
                    m.velocity_rate,
                    m.mean_replan_seconds
                );
            }
        }
        Command::ValidateBounds { common, checkpoint, intervals, samples } => {
            let mut cfg = load_config(common.config.as_ref())?;
            if let Some(n) = intervals {
                cfg.benchmark.calibration_intervals = n;
            }
            if let Some(m) = samples {
                cfg.pac.optimizer.samples = m;
                cfg.pac.optimizer.mc_samples = m;
            }
            cfg.validate()?;
            let vf = load_vf(&cfg, Some(&checkpoint))?;
            prepare_out(&common.out, &cfg)?;
            let b = cfg.benchmark.clone();
            let suite =
                environment_suite(common.seed, b.calibration_envs, &cfg.environment, cfg.dynamics.robot_radius, b.max_draws)?;
            let runner = Runner::new(cfg, vf);
            let (report, rows) = calibrate(&runner, &suite, b.calibration_intervals, 100)?;
            write_csv(&common.out.join("calibration.csv"), &rows)?;
            write_plot_data(&common.out.join("bounds.dat"), &rows)?;
            std::fs::write(common.out.join("calibration.json"), serde_json::to_string_pretty(&report)?)?;
            log::info!(
                "{} intervals: cost bound held in {:.3}, constraint bound in {:.3}; mean C+ with no sampled violations {:?}",
                report.intervals,
                report.cost_fraction,
                report.constraint_fraction,
                report.mean_cplus_zero_violation
            );
        }
        Command::Replay { common, trials, trial, mode, env, checkpoint } => {
            let log_dir = trials.parent().unwrap_or(Path::new(".")).to_path_buf();
            let cfg = load_config(Some(&common.config.unwrap_or_else(|| log_dir.join("config.json"))))?;
            let rows: Vec<TrialResult> = read_jsonl(&trials)?;
            let Some(logged) = rows.iter().find(|r| r.trial == trial && r.mode == mode) else {
                bail!("no trial {trial} for {} in {}", mode.name(), trials.display());
            };
            let env_file = env.unwrap_or_else(|| env_path(&log_dir, trial));
            let environment = Environment::from_json(&std::fs::read_to_string(&env_file)?)
                .with_context(|| format!("parsing {}", env_file.display()))?;
            let vf = load_vf(&cfg, checkpoint.as_ref())?;
            let runner = Runner::new(cfg, vf);
            let run = runner.replay(logged, &environment)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join(format!("trial_{trial:04}_{}.csv", mode.name().to_lowercase()));
            let n = write_trace_csv(&path, &run.trace, &environment, &runner)?;
            log::info!("replayed {:?} after {:.2} s; {n} rows written to {}", run.result.outcome, run.result.sim_time, path.display());
        }
    }
    Ok(())
}

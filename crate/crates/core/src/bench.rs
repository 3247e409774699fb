//! Closed-loop benchmark harness: seeded environment suites, trials per
//! planning mode, outcome scoring, bound calibration and trial replay.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::dynamics::{ControlInput, VehicleState, PLANNING_DT};
use crate::mpc::{Controller, IntervalRecord, PlanError, Snapshot, TerminalMode};
use crate::pac::PacBoundReport;
use crate::td3::ValueFunction;
use crate::world::{
    check_true_collision, goal_reached, is_blocked, raycast_scan, sample_environment, Environment, EnvironmentConfig,
    WorldError,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("mode {0:?} needs a trained checkpoint")]
    MissingCheckpoint(BenchMode),
    #[error("only {found} blocked environments in {draws} draws")]
    SuiteExhausted { found: usize, draws: usize },
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BenchMode {
    Quadratic,
    LearnedVf,
    RawActor,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Quadratic, BenchMode::LearnedVf, BenchMode::RawActor];

    pub fn terminal(self) -> Option<TerminalMode> {
        match self {
            BenchMode::Quadratic => Some(TerminalMode::Quadratic),
            BenchMode::LearnedVf => Some(TerminalMode::LearnedVf),
            BenchMode::RawActor => None,
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != BenchMode::Quadratic
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Quadratic => "QUADRATIC",
            BenchMode::LearnedVf => "LEARNED_VF",
            BenchMode::RawActor => "RAW_ACTOR",
        }
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode {s:?}; expected QUADRATIC, LEARNED_VF or RAW_ACTOR"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Goal,
    Timeout,
    ObstacleViolation,
    VelocityViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Blocked environments per suite.
    pub trials: usize,
    /// Simulated seconds before a trial times out.
    pub timeout: f64,
    pub modes: Vec<BenchMode>,
    /// Cap on environment draws while filling a suite.
    pub max_draws: usize,
    /// Environments used by the bound calibration run.
    pub calibration_envs: usize,
    /// Minimum number of planning intervals collected for calibration.
    pub calibration_intervals: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            timeout: 60.0,
            modes: BenchMode::ALL.to_vec(),
            max_draws: 100_000,
            calibration_envs: 5,
            calibration_intervals: 200,
        }
    }
}

/// One environment of a suite, with the seed that generated it.
#[derive(Debug, Clone)]
pub struct SuiteEnv {
    pub index: usize,
    pub env_seed: u64,
    pub env: Environment,
}

/// First `n` blocked environments drawn from seeds produced by
/// `base_seed`, each with the robot at rest facing the goal.
pub fn environment_suite(
    base_seed: u64,
    n: usize,
    cfg: &EnvironmentConfig,
    robot_radius: f64,
    max_draws: usize,
) -> Result<Vec<SuiteEnv>, BenchError> {
    let mut master = ChaCha8Rng::seed_from_u64(base_seed);
    let mut out = Vec::with_capacity(n);
    let mut draws = 0;
    while out.len() < n {
        if draws >= max_draws {
            return Err(BenchError::SuiteExhausted { found: out.len(), draws });
        }
        draws += 1;
        let env_seed: u64 = master.gen();
        let mut env = sample_environment(&mut ChaCha8Rng::seed_from_u64(env_seed), cfg)?;
        env.seed = Some(env_seed);
        env.face_goal();
        if is_blocked(&env, robot_radius) {
            out.push(SuiteEnv { index: out.len(), env_seed, env });
        }
    }
    Ok(out)
}

/// Seed of the trial random stream; shared by every mode on an environment.
pub fn trial_seed(env_seed: u64) -> u64 {
    env_seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub env_seed: u64,
    pub env_hash: String,
    pub mode: BenchMode,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: Outcome,
    pub sim_time: f64,
    pub bounds: Vec<PacBoundReport>,
}

/// Interval log line: one replan of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalLine {
    pub trial: usize,
    pub mode: BenchMode,
    #[serde(flatten)]
    pub record: IntervalRecord,
}

/// Executed state and applied control at every integration step.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    pub result: TrialResult,
    pub intervals: Vec<IntervalRecord>,
    pub trace: Trace,
}

/// Shared, read-only inputs of every trial.
#[derive(Debug, Clone)]
pub struct Runner {
    pub config: Config,
    pub vf: Option<Arc<ValueFunction>>,
    pub config_hash: String,
}

impl Runner {
    pub fn new(config: Config, vf: Option<ValueFunction>) -> Self {
        let config_hash = config.hash();
        Self { config, vf: vf.map(Arc::new), config_hash }
    }

    fn classify(&self, x: &VehicleState, env: &Environment) -> Option<Outcome> {
        let d = &self.config.dynamics;
        if check_true_collision(x, env, d.robot_radius) {
            Some(Outcome::ObstacleViolation)
        } else if d.constraint().velocity_violated(x) {
            Some(Outcome::VelocityViolation)
        } else if goal_reached(x, &env.goal, d.goal_radius) {
            Some(Outcome::Goal)
        } else {
            None
        }
    }

    /// Runs `mode` on `env` from its start state until the goal, a
    /// violation or the timeout.
    pub fn run_trial(&self, trial: usize, env_seed: u64, env: &Environment, mode: BenchMode) -> Result<TrialRun, BenchError> {
        if mode.needs_checkpoint() && self.vf.is_none() {
            return Err(BenchError::MissingCheckpoint(mode));
        }
        let cfg = &self.config;
        let seed = trial_seed(env_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let substeps = cfg.pac.planner.exec_substeps;
        let sub_dt = PLANNING_DT / substeps as f64;
        let max_steps = (cfg.benchmark.timeout / sub_dt).round() as usize;
        let model = cfg.dynamics.model().map_err(ConfigError::from)?;
        let mut controller = match mode.terminal() {
            Some(t) => Some(Controller::new(cfg.planner(t, self.vf.clone())?)),
            None => None,
        };
        let mut trace = Trace::default();
        let mut intervals = Vec::new();
        let mut state = env.start;
        let mut outcome = self.classify(&state, env);
        while outcome.is_none() && trace.states.len() < max_steps {
            let (states, controls) = match controller.as_mut() {
                Some(c) => {
                    let step = c.step(&Snapshot::observe(env, state, &cfg.lidar), &mut rng)?;
                    intervals.push(step.record);
                    (step.states, step.controls)
                }
                None => {
                    let vf = self.vf.as_ref().expect("checked above");
                    let scan = raycast_scan(env, (state.x, state.y, state.theta), &cfg.lidar);
                    let raw = vf.actor.forward(&vf.observation(&state, &scan, &env.goal), None).expect("actor width");
                    let u = ControlInput::new(raw[0].tanh(), raw[1].tanh());
                    let mut states = vec![state];
                    for _ in 0..substeps {
                        let next = model.step_stochastic(states.last().unwrap(), &u, &cfg.dynamics.noise, &mut rng, sub_dt);
                        states.push(next);
                    }
                    (states, vec![u; substeps])
                }
            };
            for (next, u) in states[1..].iter().zip(controls) {
                trace.times.push(trace.states.len() as f64 * sub_dt);
                trace.states.push(state);
                trace.controls.push(u);
                state = *next;
                outcome = self.classify(&state, env);
                if outcome.is_some() || trace.states.len() >= max_steps {
                    break;
                }
            }
        }
        let result = TrialResult {
            trial,
            env_seed,
            env_hash: env.content_hash(),
            mode,
            seed,
            config_hash: self.config_hash.clone(),
            outcome: outcome.unwrap_or(Outcome::Timeout),
            sim_time: trace.states.len() as f64 * sub_dt,
            bounds: intervals.iter().map(|r| r.report.clone()).collect(),
        };
        Ok(TrialRun { result, intervals, trace })
    }

    /// Every mode on every environment, in parallel; results are ordered by
    /// trial, then by mode.
    pub fn run_suite(&self, suite: &[SuiteEnv], modes: &[BenchMode]) -> Result<Vec<TrialRun>, BenchError> {
        for &m in modes {
            if m.needs_checkpoint() && self.vf.is_none() {
                return Err(BenchError::MissingCheckpoint(m));
            }
        }
        let jobs: Vec<(&SuiteEnv, BenchMode)> = suite.iter().flat_map(|e| modes.iter().map(move |&m| (e, m))).collect();
        jobs.par_iter()
            .map(|(e, m)| {
                let run = self.run_trial(e.index, e.env_seed, &e.env, *m)?;
                log::info!("trial {} {}: {:?} after {:.2} s", e.index, m.name(), run.result.outcome, run.result.sim_time);
                Ok(run)
            })
            .collect()
    }

    /// Re-executes a logged trial. Refuses when the environment, config or
    /// seed do not match the record.
    pub fn replay(&self, logged: &TrialResult, env: &Environment) -> Result<TrialRun, BenchError> {
        let hash = env.content_hash();
        if hash != logged.env_hash {
            return Err(BenchError::Mismatch(format!("environment hash {hash} differs from logged {}", logged.env_hash)));
        }
        if self.config_hash != logged.config_hash {
            return Err(BenchError::Mismatch(format!(
                "config hash {} differs from logged {}",
                self.config_hash, logged.config_hash
            )));
        }
        if env.seed != Some(logged.env_seed) || trial_seed(logged.env_seed) != logged.seed {
            return Err(BenchError::Mismatch(format!(
                "seed {} does not derive from environment seed {}",
                logged.seed, logged.env_seed
            )));
        }
        let run = self.run_trial(logged.trial, logged.env_seed, env, logged.mode)?;
        if run.result != *logged {
            return Err(BenchError::Mismatch(format!(
                "replayed outcome {:?} at {:.2} s, logged {:?} at {:.2} s",
                run.result.outcome, run.result.sim_time, logged.outcome, logged.sim_time
            )));
        }
        Ok(run)
    }
}

/// Counts and rates for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: BenchMode,
    pub trials: usize,
    pub goal: usize,
    pub timeout: usize,
    pub obstacle_violation: usize,
    pub velocity_violation: usize,
    pub goal_rate: f64,
    pub timeout_rate: f64,
    pub obstacle_rate: f64,
    pub velocity_rate: f64,
    pub intervals: usize,
    /// Fraction of intervals with the Monte Carlo cost at or below `J⁺`.
    pub cost_calibration: Option<f64>,
    /// Fraction of intervals with the Monte Carlo violation rate at or below `C⁺`.
    pub constraint_calibration: Option<f64>,
    pub mean_replan_seconds: Option<f64>,
}

fn rate(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Fractions of intervals where the fresh estimates respect the bounds.
pub fn calibration_fractions(bounds: &[&PacBoundReport]) -> (Option<f64>, Option<f64>) {
    let cost: Vec<bool> = bounds.iter().filter_map(|b| b.mc_cost.map(|c| c <= b.jplus)).collect();
    let cons: Vec<bool> = bounds.iter().filter_map(|b| b.mc_violation.map(|c| c <= b.cplus)).collect();
    let frac = |v: &[bool]| (!v.is_empty()).then(|| rate(v.iter().filter(|&&x| x).count(), v.len()));
    (frac(&cost), frac(&cons))
}

/// Per-mode summary from trial rows; replan times come from the interval log.
pub fn summarize(results: &[TrialResult], intervals: &[IntervalLine]) -> Vec<ModeSummary> {
    let mut modes: Vec<BenchMode> = results.iter().map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    modes
        .into_iter()
        .map(|mode| {
            let rows: Vec<&TrialResult> = results.iter().filter(|r| r.mode == mode).collect();
            let count = |o: Outcome| rows.iter().filter(|r| r.outcome == o).count();
            let n = rows.len();
            let bounds: Vec<&PacBoundReport> = rows.iter().flat_map(|r| r.bounds.iter()).collect();
            let (cost_calibration, constraint_calibration) = calibration_fractions(&bounds);
            let times: Vec<f64> = intervals.iter().filter(|l| l.mode == mode).map(|l| l.record.replan_seconds).collect();
            ModeSummary {
                mode,
                trials: n,
                goal: count(Outcome::Goal),
                timeout: count(Outcome::Timeout),
                obstacle_violation: count(Outcome::ObstacleViolation),
                velocity_violation: count(Outcome::VelocityViolation),
                goal_rate: rate(count(Outcome::Goal), n),
                timeout_rate: rate(count(Outcome::Timeout), n),
                obstacle_rate: rate(count(Outcome::ObstacleViolation), n),
                velocity_rate: rate(count(Outcome::VelocityViolation), n),
                intervals: bounds.len(),
                cost_calibration,
                constraint_calibration,
                mean_replan_seconds: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
            }
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), BenchError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(BenchError::from))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const INTERVALS_FILE: &str = "intervals.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ENV_DIR: &str = "environments";

pub fn env_path(dir: &Path, trial: usize) -> std::path::PathBuf {
    dir.join(ENV_DIR).join(format!("env_{trial:04}.json"))
}

/// Writes trial rows, the interval log, the summary and one JSON file per
/// environment under `dir`.
pub fn write_benchmark(dir: &Path, suite: &[SuiteEnv], runs: &[TrialRun]) -> Result<Vec<ModeSummary>, BenchError> {
    std::fs::create_dir_all(dir.join(ENV_DIR))?;
    for e in suite {
        std::fs::write(env_path(dir, e.index), e.env.to_json())?;
    }
    let results: Vec<TrialResult> = runs.iter().map(|r| r.result.clone()).collect();
    let lines: Vec<IntervalLine> = runs
        .iter()
        .flat_map(|r| {
            r.intervals
                .iter()
                .map(|rec| IntervalLine { trial: r.result.trial, mode: r.result.mode, record: rec.clone() })
        })
        .collect();
    write_jsonl(&dir.join(TRIALS_FILE), &results)?;
    write_jsonl(&dir.join(INTERVALS_FILE), &lines)?;
    let summary = summarize(&results, &lines);
    write_csv(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Row of the bound-calibration series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub index: usize,
    pub env: usize,
    pub round: usize,
    pub interval: usize,
    pub jplus: f64,
    pub mc_cost: f64,
    pub cplus: f64,
    pub mc_violation: f64,
    pub archive_violation_rate: f64,
    pub replan_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub intervals: usize,
    pub cost_fraction: f64,
    pub constraint_fraction: f64,
    /// Mean `C⁺` over intervals whose archive held no violating sample.
    pub mean_cplus_zero_violation: Option<f64>,
    pub zero_violation_intervals: usize,
    pub mean_replan_seconds: f64,
    pub outcomes: Vec<Outcome>,
}

/// Closed-loop learned-terminal-cost episodes on `suite`, repeated in rounds
/// with fresh seeds until at least `min_intervals` replans are logged.
pub fn calibrate(
    runner: &Runner,
    suite: &[SuiteEnv],
    min_intervals: usize,
    max_rounds: usize,
) -> Result<(CalibrationReport, Vec<CalibrationRow>), BenchError> {
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for round in 0..max_rounds {
        let runs: Vec<Result<TrialRun, BenchError>> = suite
            .par_iter()
            .map(|e| {
                let seed = if round == 0 { e.env_seed } else { e.env_seed.wrapping_add(round as u64) };
                runner.run_trial(e.index, seed, &e.env, BenchMode::LearnedVf)
            })
            .collect();
        for (e, run) in suite.iter().zip(runs) {
            let run = run?;
            outcomes.push(run.result.outcome);
            for rec in run.intervals {
                let r = &rec.report;
                rows.push(CalibrationRow {
                    index: rows.len(),
                    env: e.index,
                    round,
                    interval: rec.interval,
                    jplus: r.jplus,
                    mc_cost: r.mc_cost.unwrap_or(f64::NAN),
                    cplus: r.cplus,
                    mc_violation: r.mc_violation.unwrap_or(f64::NAN),
                    archive_violation_rate: rec.archive_violation_rate,
                    replan_seconds: rec.replan_seconds,
                });
            }
        }
        log::info!("calibration round {round}: {} intervals", rows.len());
        if rows.len() >= min_intervals {
            break;
        }
    }
    let n = rows.len();
    let zero: Vec<&CalibrationRow> = rows.iter().filter(|r| r.archive_violation_rate == 0.0).collect();
    let report = CalibrationReport {
        intervals: n,
        cost_fraction: rate(rows.iter().filter(|r| r.mc_cost <= r.jplus).count(), n),
        constraint_fraction: rate(rows.iter().filter(|r| r.mc_violation <= r.cplus).count(), n),
        mean_cplus_zero_violation: (!zero.is_empty()).then(|| zero.iter().map(|r| r.cplus).sum::<f64>() / zero.len() as f64),
        zero_violation_intervals: zero.len(),
        mean_replan_seconds: if n == 0 { 0.0 } else { rows.iter().map(|r| r.replan_seconds).sum::<f64>() / n as f64 },
        outcomes,
    };
    Ok((report, rows))
}

/// Whitespace-separated plot columns: index, J⁺, MC cost, C⁺, MC violation.
pub fn write_plot_data(path: &Path, rows: &[CalibrationRow]) -> Result<(), BenchError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# interval jplus mc_cost cplus mc_violation")?;
    for r in rows {
        writeln!(w, "{} {} {} {} {}", r.index, r.jplus, r.mc_cost, r.cplus, r.mc_violation)?;
    }
    w.flush()?;
    Ok(())
}

/// Trace as CSV: time, state, applied control and the lidar ranges seen
/// from each state.
pub fn write_trace_csv(path: &Path, trace: &Trace, env: &Environment, runner: &Runner) -> Result<usize, BenchError> {
    let lidar = &runner.config.lidar;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["t", "x", "y", "theta", "v", "steer", "accel", "steer_rate"].map(String::from).to_vec();
    header.extend((0..lidar.beams).map(|k| format!("range_{k}")));
    w.write_record(&header)?;
    for ((t, x), u) in trace.times.iter().zip(&trace.states).zip(&trace.controls) {
        let scan = raycast_scan(env, (x.x, x.y, x.theta), lidar);
        let mut row: Vec<String> = [*t, x.x, x.y, x.theta, x.v, x.steer, u.accel, u.steer_rate].map(|v| v.to_string()).to_vec();
        row.extend(scan.ranges.iter().map(|r| r.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(trace.states.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::td3::MdpConfig;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.environment.obstacle_count = [0, 25];
        cfg.pac.optimizer.samples = 32;
        cfg.pac.optimizer.iterations = 1;
        cfg.pac.optimizer.mc_samples = 32;
        cfg.benchmark.timeout = 1.0;
        cfg
    }

    fn random_vf(seed: u64) -> ValueFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = MdpConfig::default();
        let d = mdp.state_dim();
        ValueFunction::new(Mlp::new(&[d, 16, 2], 0.1, &mut rng), Mlp::new(&[d + 2, 16, 1], 0.1, &mut rng), mdp)
    }

    #[test]
    fn modes_parse() {
        assert_eq!("learned_vf".parse::<BenchMode>().unwrap(), BenchMode::LearnedVf);
        assert_eq!("RAW_ACTOR".parse::<BenchMode>().unwrap(), BenchMode::RawActor);
        assert!("greedy".parse::<BenchMode>().is_err());
        assert_eq!(serde_json::to_string(&Outcome::ObstacleViolation).unwrap(), "\"OBSTACLE_VIOLATION\"");
    }

    #[test]
    fn suite_is_blocked_and_seeded() {
        let cfg = small_config();
        let a = environment_suite(3, 6, &cfg.environment, 0.2, 10_000).unwrap();
        let b = environment_suite(3, 6, &cfg.environment, 0.2, 10_000).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(is_blocked(&x.env, 0.2));
            assert_eq!(x.env.content_hash(), y.env.content_hash());
            let (dx, dy) = (x.env.goal.x - x.env.start.x, x.env.goal.y - x.env.start.y);
            assert_eq!(x.env.start.theta, dy.atan2(dx));
            assert_eq!((x.env.start.v, x.env.start.steer), (0.0, 0.0));
        }
        assert!(environment_suite(3, 0, &cfg.environment, 0.2, 0).unwrap().is_empty());
    }

    #[test]
    fn empty_suite_gives_empty_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let summary = write_benchmark(dir.path(), &[], &[]).unwrap();
        assert!(summary.is_empty());
        assert!(read_jsonl::<TrialResult>(&dir.path().join(TRIALS_FILE)).unwrap().is_empty());
        assert!(dir.path().join(SUMMARY_FILE).exists());
    }

    #[test]
    fn trials_are_deterministic_and_share_environments() {
        let cfg = small_config();
        let suite = environment_suite(5, 2, &cfg.environment, 0.2, 10_000).unwrap();
        let runner = Runner::new(cfg, Some(random_vf(1)));
        let modes = BenchMode::ALL;
        let a = runner.run_suite(&suite, &modes).unwrap();
        let b = runner.run_suite(&suite, &modes).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.result, y.result);
        }
        for chunk in a.chunks(3) {
            assert!(chunk.iter().all(|r| r.result.env_hash == chunk[0].result.env_hash));
        }
        let dt = PLANNING_DT / 5.0;
        for r in &a {
            assert!(r.result.sim_time <= 1.0 + 1e-9);
            assert_eq!(r.trace.states.len() as f64 * dt, r.result.sim_time);
        }
    }

    #[test]
    fn summary_reproduces_from_rows() {
        let cfg = small_config();
        let suite = environment_suite(8, 3, &cfg.environment, 0.2, 10_000).unwrap();
        let runner = Runner::new(cfg, Some(random_vf(2)));
        let runs = runner.run_suite(&suite, &[BenchMode::Quadratic, BenchMode::RawActor]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = write_benchmark(dir.path(), &suite, &runs).unwrap();
        let rows: Vec<TrialResult> = read_jsonl(&dir.path().join(TRIALS_FILE)).unwrap();
        let lines: Vec<IntervalLine> = read_jsonl(&dir.path().join(INTERVALS_FILE)).unwrap();
        assert_eq!(summarize(&rows, &lines), summary);
        let mut rdr = csv::Reader::from_path(dir.path().join(SUMMARY_FILE)).unwrap();
        let from_file: Vec<ModeSummary> = rdr.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(from_file, summary);
        for m in &summary {
            let total = m.goal_rate + m.timeout_rate + m.obstacle_rate + m.velocity_rate;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_and_rejects_tampering() {
        let cfg = small_config();
        let suite = environment_suite(9, 1, &cfg.environment, 0.2, 10_000).unwrap();
        let runner = Runner::new(cfg, None);
        let run = runner.run_trial(0, suite[0].env_seed, &suite[0].env, BenchMode::Quadratic).unwrap();
        let again = runner.replay(&run.result, &suite[0].env).unwrap();
        assert_eq!(again.trace.states, run.trace.states);

        let mut bad = run.result.clone();
        bad.seed ^= 1;
        assert!(matches!(runner.replay(&bad, &suite[0].env), Err(BenchError::Mismatch(_))));
        let mut other = suite[0].env.clone();
        other.goal.x += 0.5;
        assert!(matches!(runner.replay(&run.result, &other), Err(BenchError::Mismatch(_))));
        let mut cfg = runner.config.clone();
        cfg.pac.optimizer.samples = 16;
        assert!(matches!(Runner::new(cfg, None).replay(&run.result, &suite[0].env), Err(BenchError::Mismatch(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = write_trace_csv(&path, &again.trace, &suite[0].env, &runner).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), rows + 1);
        assert_eq!(rows, (run.result.sim_time / 0.02).round() as usize);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let cfg = small_config();
        let suite = environment_suite(1, 1, &cfg.environment, 0.2, 10_000).unwrap();
        let runner = Runner::new(cfg, None);
        assert!(matches!(runner.run_suite(&suite, &[BenchMode::LearnedVf]), Err(BenchError::MissingCheckpoint(_))));
    }

    #[test]
    fn calibration_fraction_counts() {
        let mk = |jplus: f64, mc: f64| PacBoundReport {
            jplus,
            cplus: 0.1,
            alpha_cost: 1.0,
            alpha_constraint: 1.0,
            w: 1.0,
            shift: 0.0,
            mc_cost: Some(mc),
            mc_violation: Some(0.0),
            delta: 0.05,
        };
        let b = [mk(1.0, 0.5), mk(1.0, 1.5), mk(2.0, 2.0), mk(1.0, 0.9)];
        let refs: Vec<&PacBoundReport> = b.iter().collect();
        assert_eq!(calibration_fractions(&refs), (Some(0.75), Some(1.0)));
        assert_eq!(calibration_fractions(&[]), (None, None));
    }
}

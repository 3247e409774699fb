//! Sampling-based receding-horizon planner: scores feedback policies drawn
//! from the surrogate and executes the chosen one for a replanning period.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    simulate_closed_loop, rollout_policy, BicycleModel, ControlInput, DynamicsError, FeedbackPolicy, LqrWeights,
    NoiseModel, VehicleState, PLANNING_DT,
};
use crate::nn::{BatchMask, DropoutMask};
use crate::pac::{optimize_policy, PacBoundReport, PacConfig, PacError, SampleEvaluator, Surrogate, SurrogateSummary};
use crate::td3::mdp::running_cost;
use crate::td3::ValueFunction;
use crate::terminal::project_scan;
use crate::world::{
    check_constraint, extract_obstacle_points, raycast_scan, ConstraintConfig, Environment, LidarConfig, LidarScan,
    ObstaclePoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TerminalMode {
    Quadratic,
    LearnedVf,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("learned terminal cost requires a value function")]
    MissingValueFunction,
    #[error(transparent)]
    Pac(#[from] PacError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Planning steps per nominal trajectory.
    pub horizon: usize,
    /// Planning steps executed between replans.
    pub replan_steps: usize,
    /// Integration substeps per planning step during execution.
    pub exec_substeps: usize,
    /// Terminal weights for the quadratic terminal cost.
    pub quadratic_qf: [f64; 5],
    /// Evaluate the value function with a per-sample dropout mask.
    pub mc_dropout: bool,
    /// Flag samples whose terminal value falls below the current value.
    pub value_improvement: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            replan_steps: 2,
            exec_substeps: 5,
            quadratic_qf: [1.0, 1.0, 0.0, 0.0, 0.0],
            mc_dropout: true,
            value_improvement: true,
        }
    }
}

impl PlannerConfig {
    pub fn param_dim(&self) -> usize {
        2 * self.horizon
    }
}

/// Everything the planner needs that does not change between replans.
#[derive(Debug, Clone)]
pub struct Planner {
    pub model: BicycleModel,
    pub noise: NoiseModel,
    pub lqr: LqrWeights,
    pub constraint: ConstraintConfig,
    pub running_q: [f64; 5],
    pub lidar: LidarConfig,
    pub config: PlannerConfig,
    pub pac: PacConfig,
    pub mode: TerminalMode,
    pub vf: Option<Arc<ValueFunction>>,
}

/// World information available to the planner at a replan.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: VehicleState,
    pub scan: LidarScan,
    pub points: Vec<ObstaclePoint>,
    pub goal: VehicleState,
}

impl Snapshot {
    pub fn observe(env: &Environment, state: VehicleState, lidar: &LidarConfig) -> Self {
        let pose = (state.x, state.y, state.theta);
        let scan = raycast_scan(env, pose, lidar);
        let points = extract_obstacle_points(&scan, pose, lidar);
        Self { state, scan, points, goal: env.goal }
    }
}

pub fn controls_from_params(xi: &[f64]) -> Vec<ControlInput> {
    xi.chunks_exact(2).map(|c| ControlInput::new(c[0], c[1])).collect()
}

const CHUNK: usize = 32;

struct Rolled {
    running: f64,
    violated: bool,
    terminal: VehicleState,
    masks: Option<(DropoutMask, DropoutMask)>,
}

impl Planner {
    pub fn new(
        model: BicycleModel,
        noise: NoiseModel,
        lqr: LqrWeights,
        constraint: ConstraintConfig,
        running_q: [f64; 5],
        lidar: LidarConfig,
        config: PlannerConfig,
        pac: PacConfig,
        mode: TerminalMode,
        vf: Option<Arc<ValueFunction>>,
    ) -> Result<Self, PlanError> {
        if mode == TerminalMode::LearnedVf && vf.is_none() {
            return Err(PlanError::MissingValueFunction);
        }
        Ok(Self { model, noise, lqr, constraint, running_q, lidar, config, pac, mode, vf })
    }

    fn rollout(&self, xi: &[f64], snap: &Snapshot, rng: &mut ChaCha8Rng) -> Rolled {
        let controls = controls_from_params(xi);
        let traj = match FeedbackPolicy::synthesize(&self.model, snap.state, &controls, PLANNING_DT, &self.lqr, 1) {
            Ok(policy) => rollout_policy(&self.model, &policy, snap.state, &self.noise, rng),
            Err(_) => {
                let nominal = self.model.nominal_trajectory(snap.state, &controls, PLANNING_DT);
                let policy = FeedbackPolicy::with_zero_gains(nominal, 1).expect("consistent nominal");
                rollout_policy(&self.model, &policy, snap.state, &self.noise, rng)
            }
        };
        let n = traj.controls.len();
        let running = traj.states[..n].iter().map(|x| running_cost(x, &snap.goal, &self.running_q)).sum();
        let violated = traj.states.iter().any(|x| check_constraint(x, &snap.points, &self.constraint));
        let masks = match (&self.vf, self.mode) {
            (Some(vf), TerminalMode::LearnedVf) if self.config.mc_dropout => Some(vf.sample_masks(rng)),
            _ => None,
        };
        Rolled { running, violated, terminal: *traj.terminal(), masks }
    }

    fn score_chunk(&self, samples: &[Vec<f64>], seeds: &[u64], snap: &Snapshot, obs_now: &[f64]) -> Vec<(f64, bool)> {
        let rolled: Vec<Rolled> = samples
            .iter()
            .zip(seeds)
            .map(|(xi, &s)| self.rollout(xi, snap, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect();
        match self.mode {
            TerminalMode::Quadratic => rolled
                .iter()
                .map(|r| (r.running + running_cost(&r.terminal, &snap.goal, &self.config.quadratic_qf), r.violated))
                .collect(),
            TerminalMode::LearnedVf => {
                let vf = self.vf.as_ref().expect("checked at construction");
                let n = rolled.len();
                let check = self.config.value_improvement;
                let cols = if check { 2 * n } else { n };
                let d = vf.state_dim();
                let mut obs = DMatrix::zeros(d, cols);
                for (j, r) in rolled.iter().enumerate() {
                    let t = r.terminal;
                    let projected = project_scan(&snap.points, (t.x, t.y, t.theta), &self.lidar);
                    obs.column_mut(j).copy_from_slice(&vf.observation(&t, &projected, &snap.goal));
                    if check {
                        obs.column_mut(n + j).copy_from_slice(obs_now);
                    }
                }
                let batch_masks = if rolled[0].masks.is_some() {
                    let ma: Vec<&DropoutMask> = rolled.iter().map(|r| &r.masks.as_ref().unwrap().0).cycle().take(cols).collect();
                    let mc: Vec<&DropoutMask> = rolled.iter().map(|r| &r.masks.as_ref().unwrap().1).cycle().take(cols).collect();
                    Some((BatchMask::from_masks(&vf.actor, &ma), BatchMask::from_masks(&vf.critic, &mc)))
                } else {
                    None
                };
                let v = vf.value_batch(&obs, batch_masks.as_ref().map(|(a, c)| (a, c)));
                rolled
                    .iter()
                    .enumerate()
                    .map(|(j, r)| {
                        let improvement_violated = check && v[j] < v[n + j];
                        (r.running - v[j], r.violated || improvement_violated)
                    })
                    .collect()
            }
        }
    }

    /// Costs and constraint indicators for a batch of parameter samples.
    /// Sample `j` draws its process noise and dropout mask from `seeds[j]`.
    pub fn evaluate_samples(&self, samples: &[Vec<f64>], seeds: &[u64], snap: &Snapshot) -> Vec<(f64, bool)> {
        let obs_now = match &self.vf {
            Some(vf) if self.mode == TerminalMode::LearnedVf => vf.observation(&snap.state, &snap.scan, &snap.goal),
            _ => Vec::new(),
        };
        samples
            .par_chunks(CHUNK)
            .zip(seeds.par_chunks(CHUNK))
            .flat_map_iter(|(xs, ss)| self.score_chunk(xs, ss, snap, &obs_now))
            .collect()
    }

    /// `(J, C)` for one parameter vector and noise seed.
    pub fn evaluate_trajectory(&self, xi: &[f64], snap: &Snapshot, seed: u64) -> (f64, bool) {
        self.evaluate_samples(&[xi.to_vec()], &[seed], snap)[0]
    }

    pub fn evaluator<'a>(&'a self, snap: &'a Snapshot) -> TrajectoryEvaluator<'a> {
        TrajectoryEvaluator { planner: self, snap }
    }
}

pub struct TrajectoryEvaluator<'a> {
    planner: &'a Planner,
    snap: &'a Snapshot,
}

impl SampleEvaluator for TrajectoryEvaluator<'_> {
    fn evaluate(&self, samples: &[Vec<f64>], seeds: &[u64]) -> Vec<(f64, bool)> {
        self.planner.evaluate_samples(samples, seeds, self.snap)
    }
}

/// Previous mean advanced by `steps` controls, with the final control repeated.
pub fn shift_params(mean: &[f64], steps: usize) -> Vec<f64> {
    let n = mean.len() / 2;
    let steps = steps.min(n);
    let last = [mean[2 * n - 2], mean[2 * n - 1]];
    let mut out = mean[2 * steps..].to_vec();
    for _ in 0..steps {
        out.extend_from_slice(&last);
    }
    out
}

/// One replan as written to the interval log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub interval: usize,
    pub state: VehicleState,
    pub surrogate: SurrogateSummary,
    #[serde(flatten)]
    pub report: PacBoundReport,
    /// Fraction of archived samples that violated the constraint.
    pub archive_violation_rate: f64,
    pub replan_seconds: f64,
}

/// Result of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub record: IntervalRecord,
    /// Executed states at the integration rate, starting at the pre-step state.
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub surrogate: Surrogate,
}

/// Warm-start state carried between replans.
#[derive(Debug, Clone)]
pub struct Controller {
    pub planner: Planner,
    pub mean: Vec<f64>,
    pub interval: usize,
}

impl Controller {
    pub fn new(planner: Planner) -> Self {
        let mean = vec![0.0; planner.config.param_dim()];
        Self { planner, mean, interval: 0 }
    }

    /// Initial surrogate for the next replan.
    pub fn warm_start(&self) -> Surrogate {
        let mean = if self.interval == 0 { self.mean.clone() } else { shift_params(&self.mean, self.planner.config.replan_steps) };
        Surrogate::isotropic(mean, self.planner.pac.init_var)
    }

    /// Plans from `snap`, then executes one sampled policy for the
    /// replanning period on `env` under process noise.
    pub fn step<R: Rng + ?Sized>(&mut self, snap: &Snapshot, rng: &mut R) -> Result<StepResult, PlanError> {
        let p = &self.planner;
        let start = Instant::now();
        let outcome = optimize_policy(&p.evaluator(snap), self.warm_start(), &p.pac, rng)?;
        let replan_seconds = start.elapsed().as_secs_f64();
        let xi = outcome.surrogate.sample(rng);
        let policy = FeedbackPolicy::synthesize(
            &p.model,
            snap.state,
            &controls_from_params(&xi),
            PLANNING_DT,
            &p.lqr,
            p.config.exec_substeps,
        )?;
        let (states, controls) = simulate_closed_loop(&p.model, &policy, snap.state, &p.noise, rng, p.config.replan_steps);
        let record = IntervalRecord {
            interval: self.interval,
            state: snap.state,
            surrogate: outcome.summary(),
            archive_violation_rate: outcome.archive.violation_rate(),
            report: outcome.report,
            replan_seconds,
        };
        self.mean = outcome.surrogate.mean.clone();
        self.interval += 1;
        Ok(StepResult { record, states, controls, surrogate: outcome.surrogate })
    }
}

/// Observes `env` from `state` and takes one controller step.
pub fn receding_horizon_step<R: Rng + ?Sized>(
    controller: &mut Controller,
    env: &Environment,
    state: VehicleState,
    rng: &mut R,
) -> Result<StepResult, PlanError> {
    let snap = Snapshot::observe(env, state, &controller.planner.lidar);
    controller.step(&snap, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::td3::MdpConfig;
    use crate::world::{goal_reached, Obstacle};

    fn planner(mode: TerminalMode, noise: NoiseModel, vf: Option<ValueFunction>) -> Planner {
        Planner::new(
            BicycleModel::default(),
            noise,
            LqrWeights::default(),
            ConstraintConfig::default(),
            [0.01, 0.01, 0.0, 0.0, 0.0],
            LidarConfig::default(),
            PlannerConfig::default(),
            PacConfig { samples: 128, iterations: 2, mc_samples: 128, ..Default::default() },
            mode,
            vf.map(Arc::new),
        )
        .unwrap()
    }

    fn zero_vf() -> ValueFunction {
        let mdp = MdpConfig::default();
        let d = mdp.state_dim();
        ValueFunction::new(Mlp::zeros(&[d, 8, 2], 0.1), Mlp::zeros(&[d + 2, 8, 1], 0.1), mdp)
    }

    fn random_vf(seed: u64) -> ValueFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = MdpConfig::default();
        let d = mdp.state_dim();
        ValueFunction::new(Mlp::new(&[d, 16, 2], 0.1, &mut rng), Mlp::new(&[d + 2, 16, 1], 0.1, &mut rng), mdp)
    }

    fn open_env(goal: VehicleState) -> Environment {
        Environment::empty(VehicleState::new(5.0, 5.0, 0.0, 0.0, 0.0), goal)
    }

    #[test]
    fn at_goal_with_zero_controls_costs_nothing() {
        let goal = VehicleState::new(5.0, 5.0, 0.0, 0.0, 0.0);
        let p = planner(TerminalMode::LearnedVf, NoiseModel::zero(), Some(zero_vf()));
        let snap = Snapshot::observe(&open_env(goal), goal, &p.lidar);
        assert!(snap.points.is_empty());
        assert_eq!(p.evaluate_trajectory(&[0.0; 24], &snap, 3), (0.0, false));
        let q = planner(TerminalMode::Quadratic, NoiseModel::zero(), None);
        assert_eq!(q.evaluate_trajectory(&[0.0; 24], &snap, 3), (0.0, false));
    }

    #[test]
    fn velocity_out_of_bounds_violates() {
        let goal = VehicleState::new(20.0, 5.0, 0.0, 0.0, 0.0);
        let p = planner(TerminalMode::Quadratic, NoiseModel::SIMULATION, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let snap = Snapshot::observe(&open_env(goal), VehicleState::new(5.0, 5.0, 0.0, 3.5, 0.0), &p.lidar);
        for s in 0..20 {
            let xi: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(p.evaluate_trajectory(&xi, &snap, s).1);
        }
    }

    #[test]
    fn evaluation_is_deterministic_per_seed() {
        let goal = VehicleState::new(20.0, 9.0, 0.0, 0.0, 0.0);
        let mut env = open_env(goal);
        env.obstacles.push(Obstacle::new(8.0, 5.5, 1.0));
        let p = planner(TerminalMode::LearnedVf, NoiseModel::SIMULATION, Some(random_vf(2)));
        let snap = Snapshot::observe(&env, env.start, &p.lidar);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Vec<f64>> = (0..100).map(|_| (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let seeds: Vec<u64> = (0..100).collect();
        let a = p.evaluate_samples(&xs, &seeds, &snap);
        assert_eq!(a, p.evaluate_samples(&xs, &seeds, &snap));
        for j in [0, 31, 32, 99] {
            let (c, v) = p.evaluate_trajectory(&xs[j], &snap, seeds[j]);
            assert!((c - a[j].0).abs() < 1e-9 * (1.0 + c.abs()));
            assert_eq!(v, a[j].1);
        }
        assert_ne!(p.evaluate_trajectory(&xs[0], &snap, 0), p.evaluate_trajectory(&xs[0], &snap, 1));
    }

    #[test]
    fn value_improvement_flags_worse_terminal_states() {
        // Noise-free and obstacle-free, so the flag reduces to comparing the
        // value at the nominal terminal state with the current value.
        let goal = VehicleState::new(20.0, 9.0, 0.0, 0.0, 0.0);
        let env = open_env(goal);
        let mut p = planner(TerminalMode::LearnedVf, NoiseModel::zero(), Some(random_vf(7)));
        p.config.mc_dropout = false;
        let snap = Snapshot::observe(&env, env.start, &p.lidar);
        let vf = p.vf.clone().unwrap();
        let v_now = vf.value_of(&vf.observation(&snap.state, &snap.scan, &goal), None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..30 {
            let xi: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nominal = p.model.nominal_trajectory(snap.state, &controls_from_params(&xi), PLANNING_DT);
            let t = nominal.terminal();
            let v_end = vf.value_of(&vf.observation(t, &project_scan(&[], (t.x, t.y, t.theta), &p.lidar), &goal), None);
            let (_, flagged) = p.evaluate_trajectory(&xi, &snap, s);
            assert_eq!(flagged, v_end < v_now);
        }
    }

    #[test]
    fn shift_advances_two_steps() {
        let mean: Vec<f64> = (0..24).map(|k| k as f64).collect();
        let s = shift_params(&mean, 2);
        assert_eq!(&s[..20], &mean[4..]);
        assert_eq!(&s[20..], &[22.0, 23.0, 22.0, 23.0]);
    }

    #[test]
    fn warm_start_without_optimisation_is_shifted_previous() {
        let goal = VehicleState::new(20.0, 5.0, 0.0, 0.0, 0.0);
        let mut p = planner(TerminalMode::Quadratic, NoiseModel::zero(), None);
        p.pac.gradient_steps = 0;
        let mut c = Controller::new(p);
        c.mean = (0..24).map(|k| 0.01 * k as f64).collect();
        c.interval = 1;
        let expected = shift_params(&c.mean, 2);
        assert_eq!(c.warm_start().mean, expected);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = receding_horizon_step(&mut c, &open_env(goal), VehicleState::new(5.0, 5.0, 0.0, 0.0, 0.0), &mut rng).unwrap();
        assert_eq!(out.surrogate.mean, expected);
        assert_eq!(out.states.len(), 11);
        assert_eq!(c.interval, 2);
    }

    #[test]
    fn robot_at_goal_stays_in_goal_region() {
        let goal = VehicleState::new(12.0, 12.0, 0.0, 0.0, 0.0);
        let env = Environment::empty(goal, goal);
        let p = planner(TerminalMode::Quadratic, NoiseModel::SIMULATION, None);
        let mut c = Controller::new(p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = goal;
        for _ in 0..10 {
            let out = receding_horizon_step(&mut c, &env, x, &mut rng).unwrap();
            assert!(out.states.iter().all(|s| goal_reached(s, &goal, 1.0)));
            x = *out.states.last().unwrap();
        }
        let r = c.interval;
        assert_eq!(r, 10);
    }

    #[test]
    fn learned_mode_needs_value_function() {
        let r = Planner::new(
            BicycleModel::default(),
            NoiseModel::zero(),
            LqrWeights::default(),
            ConstraintConfig::default(),
            [0.0; 5],
            LidarConfig::default(),
            PlannerConfig::default(),
            PacConfig::default(),
            TerminalMode::LearnedVf,
            None,
        );
        assert!(matches!(r, Err(PlanError::MissingValueFunction)));
    }
}

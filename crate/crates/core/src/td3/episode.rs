use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BicycleModel, ControlInput, NoiseModel, VehicleState, PLANNING_DT};
use crate::world::{check_true_collision, goal_reached, raycast_scan, ConstraintConfig, Environment, LidarScan};

use super::mdp::{reward, write_mdp_state, MdpConfig};
use super::replay::TransitionSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Violation,
    TimeLimit,
}

impl Termination {
    /// Whether the transition that ended the episode cuts bootstrapping.
    pub fn is_terminal(self) -> bool {
        !matches!(self, Termination::TimeLimit)
    }
}

/// Everything the simulator needs to step the MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub model: BicycleModel,
    pub noise: NoiseModel,
    pub mdp: MdpConfig,
    pub constraint: ConstraintConfig,
    pub goal_radius: f64,
    pub max_steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            model: BicycleModel::default(),
            noise: NoiseModel::SIMULATION,
            mdp: MdpConfig::default(),
            constraint: ConstraintConfig::default(),
            goal_radius: 1.0,
            max_steps: 250,
        }
    }
}

/// Incremental MDP episode over one environment at the planning timestep.
#[derive(Debug, Clone)]
pub struct EpisodeStepper {
    env: Environment,
    state: VehicleState,
    obs: Vec<f64>,
    steps: usize,
    done: Option<Termination>,
}

impl EpisodeStepper {
    pub fn new(env: Environment, cfg: &EpisodeConfig) -> Self {
        let state = env.start;
        let mut obs = vec![0.0; cfg.mdp.state_dim()];
        let scan = Self::scan(&env, &state, cfg);
        write_mdp_state(&state, &scan, &env.goal, &cfg.mdp, &mut obs);
        Self { env, state, obs, steps: 0, done: None }
    }

    fn scan(env: &Environment, x: &VehicleState, cfg: &EpisodeConfig) -> LidarScan {
        raycast_scan(env, (x.x, x.y, x.theta), &cfg.mdp.lidar)
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn termination(&self) -> Option<Termination> {
        self.done
    }

    /// Applies a normalised action for one planning step. Panics if the
    /// episode already ended.
    pub fn step<R: Rng + ?Sized>(&mut self, action: [f64; 2], cfg: &EpisodeConfig, rng: &mut R) -> TransitionSample {
        assert!(self.done.is_none(), "episode already terminated");
        let action = action.map(|a| a.clamp(-1.0, 1.0));
        let u = ControlInput::new(action[0], action[1]);
        let next = cfg.model.step_stochastic(&self.state, &u, &cfg.noise, rng, PLANNING_DT);
        self.steps += 1;

        let violated =
            check_true_collision(&next, &self.env, cfg.constraint.robot_radius) || cfg.constraint.velocity_violated(&next);
        let r = reward(&next, &self.env.goal, violated, &cfg.mdp);
        self.done = if violated {
            Some(Termination::Violation)
        } else if goal_reached(&next, &self.env.goal, cfg.goal_radius) {
            Some(Termination::Goal)
        } else if self.steps >= cfg.max_steps {
            Some(Termination::TimeLimit)
        } else {
            None
        };

        let state = std::mem::replace(&mut self.obs, vec![0.0; cfg.mdp.state_dim()]);
        let scan = Self::scan(&self.env, &next, cfg);
        write_mdp_state(&next, &scan, &self.env.goal, &cfg.mdp, &mut self.obs);
        self.state = next;
        TransitionSample {
            state,
            action,
            reward: r,
            next_state: self.obs.clone(),
            done: self.done.is_some_and(Termination::is_terminal),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<TransitionSample>,
    pub states: Vec<VehicleState>,
    pub termination: Termination,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Rolls `policy` (observation → normalised action) to termination.
pub fn run_episode<R, P>(env: Environment, mut policy: P, rng: &mut R, cfg: &EpisodeConfig) -> Episode
where
    R: Rng + ?Sized,
    P: FnMut(&[f64], &mut R) -> [f64; 2],
{
    let mut ep = EpisodeStepper::new(env, cfg);
    let mut transitions = Vec::new();
    let mut states = vec![*ep.state()];
    while ep.termination().is_none() {
        let a = policy(ep.observation(), rng);
        transitions.push(ep.step(a, cfg, rng));
        states.push(*ep.state());
    }
    Episode { transitions, states, termination: ep.termination().expect("loop exits on termination") }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Obstacle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero(_: &[f64], _: &mut ChaCha8Rng) -> [f64; 2] {
        [0.0, 0.0]
    }

    #[test]
    fn goal_adjacent_start_ends_at_goal() {
        let env = Environment::empty(VehicleState::new(5.0, 5.0, 0.0, 0.0, 0.0), VehicleState::new(5.5, 5.0, 0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = run_episode(env, zero, &mut rng, &EpisodeConfig::default());
        assert_eq!(ep.termination, Termination::Goal);
        assert!(ep.transitions.len() <= 3);
        assert!(ep.transitions.last().unwrap().done);
    }

    #[test]
    fn forced_collision_ends_in_violation() {
        let mut env = Environment::empty(VehicleState::new(5.0, 5.0, 0.0, 3.0, 0.0), VehicleState::new(20.0, 5.0, 0.0, 0.0, 0.0));
        env.obstacles = (0..9).map(|k| Obstacle::new(5.8, 3.0 + 0.5 * k as f64, 0.3)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EpisodeConfig { noise: NoiseModel::zero(), ..Default::default() };
        let ep = run_episode(env, |_: &[f64], _: &mut ChaCha8Rng| [1.0, 0.0], &mut rng, &cfg);
        assert_eq!(ep.termination, Termination::Violation);
        assert!(ep.transitions.len() <= 3);
        assert!(ep.transitions.last().unwrap().reward <= -cfg.mdp.violation_penalty);
    }

    #[test]
    fn idle_episode_hits_step_cap() {
        let env = Environment::empty(VehicleState::new(2.0, 2.0, 0.0, 0.0, 0.0), VehicleState::new(20.0, 20.0, 0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EpisodeConfig { noise: NoiseModel::zero(), ..Default::default() };
        let ep = run_episode(env, zero, &mut rng, &cfg);
        assert_eq!(ep.termination, Termination::TimeLimit);
        assert_eq!(ep.transitions.len(), 250);
        assert!(ep.transitions.iter().all(|t| !t.done));
    }

    #[test]
    fn transitions_chain() {
        let mut env = Environment::empty(VehicleState::new(2.0, 2.0, 0.0, 0.0, 0.0), VehicleState::new(20.0, 20.0, 0.0, 0.0, 0.0));
        env.obstacles.push(Obstacle::new(6.0, 2.5, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ep = run_episode(env, |_: &[f64], r: &mut ChaCha8Rng| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)], &mut rng, &EpisodeConfig::default());
        for w in ep.transitions.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
        assert_eq!(ep.states.len(), ep.transitions.len() + 1);
    }
}

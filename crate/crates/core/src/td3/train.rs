use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Mlp, NnError};
use crate::world::{sample_environment, EnvironmentConfig, WorldError};

use super::agent::{Td3Agent, Td3Config};
use super::episode::{EpisodeConfig, EpisodeStepper, Termination};
use super::mdp::MdpConfig;
use super::replay::ReplayBuffer;
use super::value::ValueFunction;

pub const META_FILE: &str = "training_meta.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: critic loss {critic_loss}, actor loss {actor_loss:?}")]
    Divergence { step: u64, critic_loss: f64, actor_loss: Option<f64> },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub td3: Td3Config,
    pub episode: EpisodeConfig,
    pub environment: EnvironmentConfig,
    pub seed: u64,
}

impl TrainSetup {
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("setup serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxSteps,
}

/// Windowed mean actor loss with a patience counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauTracker {
    window: usize,
    tolerance: f64,
    patience: usize,
    #[serde(skip)]
    sum: f64,
    #[serde(skip)]
    count: usize,
    pub best: Option<f64>,
    pub stale_windows: usize,
    pub window_means: Vec<f64>,
}

impl PlateauTracker {
    pub fn new(window: usize, tolerance: f64, patience: usize) -> Self {
        Self { window: window.max(1), tolerance, patience, sum: 0.0, count: 0, best: None, stale_windows: 0, window_means: Vec::new() }
    }

    /// Records one actor loss; returns `true` once the loss has failed to
    /// improve by the relative tolerance for `patience` consecutive windows.
    pub fn push(&mut self, loss: f64) -> bool {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return self.plateaued();
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        self.window_means.push(mean);
        match self.best {
            Some(b) if mean >= b - self.tolerance * b.abs() => self.stale_windows += 1,
            _ => {
                self.best = Some(mean);
                self.stale_windows = 0;
            }
        }
        self.plateaued()
    }

    pub fn plateaued(&self) -> bool {
        self.stale_windows >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub config_hash: String,
    pub wheelbase: f64,
    pub dropout: f64,
    pub stop_reason: Option<StopReason>,
    /// Share of goal / violation / time-limit endings over the last 1000 episodes.
    pub recent_outcomes: [f64; 3],
    pub plateau: PlateauTracker,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub agent: Td3Agent,
    pub meta: TrainingMeta,
}

impl TrainOutcome {
    pub fn value_function(&self, mdp: MdpConfig) -> ValueFunction {
        ValueFunction::new(self.agent.actor.clone(), self.agent.critic1.clone(), mdp)
    }
}

const NET_FILES: [&str; 6] =
    ["actor.mlp", "critic1.mlp", "critic2.mlp", "actor_target.mlp", "critic1_target.mlp", "critic2_target.mlp"];

pub fn save_checkpoint(dir: &Path, agent: &Td3Agent, meta: &TrainingMeta) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let nets =
        [&agent.actor, &agent.critic1, &agent.critic2, &agent.actor_target, &agent.critic1_target, &agent.critic2_target];
    for (name, net) in NET_FILES.iter().zip(nets) {
        net.save(&dir.join(name))?;
    }
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<TrainingMeta, TrainError> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?)
}

/// Loads the deployable value function (actor and first critic).
pub fn load_value_function(dir: &Path, mdp: MdpConfig) -> Result<ValueFunction, TrainError> {
    let meta = load_meta(dir)?;
    let actor = Mlp::load(&dir.join(NET_FILES[0]), meta.dropout)?;
    let critic = Mlp::load(&dir.join(NET_FILES[1]), meta.dropout)?;
    let d = mdp.state_dim();
    if actor.input_dim() != d || critic.input_dim() != d + 2 || actor.output_dim() != 2 || critic.output_dim() != 1 {
        return Err(TrainError::Mismatch(format!(
            "network widths {:?} / {:?} do not fit a {d}-dimensional observation",
            actor.dims(),
            critic.dims()
        )));
    }
    Ok(ValueFunction::new(actor, critic, mdp))
}

/// Runs TD3 on freshly sampled environments until the actor loss plateaus
/// (after `min_steps`) or `max_steps` environment steps have been taken.
/// Checkpoints go to `out` when given.
pub fn train(setup: &TrainSetup, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let started = Instant::now();
    let cfg = &setup.td3;
    let ep_cfg = EpisodeConfig { max_steps: cfg.max_episode_steps, ..setup.episode.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let state_dim = ep_cfg.mdp.state_dim();
    let mut agent = Td3Agent::new(state_dim, cfg, &mut rng);
    let mut buffer = ReplayBuffer::new(state_dim, cfg.buffer_capacity.max(1));
    let mut plateau = PlateauTracker::new(cfg.plateau_window, cfg.plateau_tolerance, cfg.plateau_patience);
    let mut outcomes: VecDeque<Termination> = VecDeque::with_capacity(1000);
    let mut episode: Option<EpisodeStepper> = None;
    let mut episodes = 0u64;
    let mut steps = 0u64;
    let mut stop_reason = None;
    let mut critic_loss_acc = (0.0, 0usize);

    let meta = |steps, episodes, agent: &Td3Agent, plateau: &PlateauTracker, outcomes: &VecDeque<Termination>, stop| {
        let n = outcomes.len().max(1) as f64;
        let share = |t| outcomes.iter().filter(|&&o| o == t).count() as f64 / n;
        TrainingMeta {
            steps,
            updates: agent.updates(),
            episodes,
            config_hash: setup.config_hash(),
            wheelbase: ep_cfg.model.wheelbase,
            dropout: cfg.dropout,
            stop_reason: stop,
            recent_outcomes: [share(Termination::Goal), share(Termination::Violation), share(Termination::TimeLimit)],
            plateau: plateau.clone(),
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    };

    while steps < cfg.max_steps {
        let ep = match &mut episode {
            Some(ep) => ep,
            None => {
                let mut env = sample_environment(&mut rng, &setup.environment)?;
                env.start.v = 0.0;
                episode.insert(EpisodeStepper::new(env, &ep_cfg))
            }
        };
        let action = if steps < cfg.warmup_steps {
            [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
        } else {
            agent.explore(ep.observation(), cfg.exploration_noise, &mut rng)
        };
        let t = ep.step(action, &ep_cfg, &mut rng);
        buffer.push(&t);
        steps += 1;
        if let Some(end) = ep.termination() {
            episodes += 1;
            if outcomes.len() == 1000 {
                outcomes.pop_front();
            }
            outcomes.push_back(end);
            episode = None;
        }

        if steps >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
            let batch = buffer.sample(&mut rng, cfg.batch_size);
            let stats = agent.update(&batch, cfg, &mut rng);
            if !stats.critic_loss.is_finite() || stats.actor_loss.is_some_and(|l| !l.is_finite()) || !agent.is_finite() {
                return Err(TrainError::Divergence { step: steps, critic_loss: stats.critic_loss, actor_loss: stats.actor_loss });
            }
            critic_loss_acc.0 += stats.critic_loss;
            critic_loss_acc.1 += 1;
            if let Some(l) = stats.actor_loss {
                if plateau.push(l) && steps >= cfg.min_steps {
                    stop_reason = Some(StopReason::Plateau);
                    break;
                }
            }
        }

        if steps % 10_000 == 0 {
            let m = meta(steps, episodes, &agent, &plateau, &outcomes, None);
            log::info!(
                "step {steps} episodes {episodes} goal {:.3} violation {:.3} timeout {:.3} critic loss {:.4} actor loss {:?} ({:.0} s)",
                m.recent_outcomes[0],
                m.recent_outcomes[1],
                m.recent_outcomes[2],
                critic_loss_acc.0 / critic_loss_acc.1.max(1) as f64,
                plateau.window_means.last(),
                m.wall_seconds
            );
            critic_loss_acc = (0.0, 0);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && steps % cfg.checkpoint_every == 0 {
                save_checkpoint(dir, &agent, &meta(steps, episodes, &agent, &plateau, &outcomes, None))?;
            }
        }
    }
    let stop_reason = stop_reason.or(Some(StopReason::MaxSteps));
    let meta = meta(steps, episodes, &agent, &plateau, &outcomes, stop_reason);
    if let Some(dir) = out {
        save_checkpoint(dir, &agent, &meta)?;
    }
    Ok(TrainOutcome { agent, meta })
}

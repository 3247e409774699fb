use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, BatchMask, Mlp, DEFAULT_DROPOUT};

use super::replay::Batch;

/// Action dimension (acceleration, steering rate), normalised to `[-1, 1]`.
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub warmup_steps: u64,
    pub buffer_capacity: usize,
    pub max_episode_steps: usize,
    /// Hard cap on environment steps.
    pub max_steps: u64,
    /// No plateau stop before this many environment steps.
    pub min_steps: u64,
    /// Updates per actor-loss window.
    pub plateau_window: usize,
    /// Relative improvement a window must achieve over the best so far.
    pub plateau_tolerance: f64,
    /// Consecutive non-improving windows that end training.
    pub plateau_patience: usize,
    /// Environment steps between checkpoints (0 disables periodic saves).
    pub checkpoint_every: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            dropout: DEFAULT_DROPOUT,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            exploration_noise: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            warmup_steps: 10_000,
            buffer_capacity: 1_000_000,
            max_episode_steps: 250,
            max_steps: 2_000_000,
            min_steps: 0,
            plateau_window: 100,
            plateau_tolerance: 0.01,
            plateau_patience: 10,
            checkpoint_every: 50_000,
        }
    }
}

/// Bootstrapped TD target `r + γ·min(q1, q2)`, cut at terminal transitions.
pub fn td3_target(reward: f64, gamma: f64, q1: f64, q2: f64, done: bool) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

/// Losses reported by one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Present on steps where the actor was updated.
    pub actor_loss: Option<f64>,
}

/// Actor, twin critics, their targets and optimiser state.
#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    updates: u64,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

/// Stacks states over actions: the critic input.
pub fn critic_input(states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
    let (ds, n) = states.shape();
    let mut x = DMatrix::zeros(ds + actions.nrows(), n);
    x.rows_mut(0, ds).copy_from(states);
    x.rows_mut(ds, actions.nrows()).copy_from(actions);
    x
}

/// Actor forward with the output squashed by `tanh`.
pub fn actor_actions(actor: &Mlp, states: &DMatrix<f64>, mask: Option<&BatchMask>) -> DMatrix<f64> {
    actor.forward_batch(states, mask).expect("actor input width").map(f64::tanh)
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, cfg: &Td3Config, rng: &mut R) -> Self {
        let actor = Mlp::new(&dims(state_dim, &cfg.hidden, ACTION_DIM), cfg.dropout, rng);
        let critic1 = Mlp::new(&dims(state_dim + ACTION_DIM, &cfg.hidden, 1), cfg.dropout, rng);
        let critic2 = Mlp::new(&dims(state_dim + ACTION_DIM, &cfg.hidden, 1), cfg.dropout, rng);
        Self::from_nets(actor, critic1, critic2)
    }

    /// Wraps existing live networks; targets start as copies.
    pub fn from_nets(actor: Mlp, critic1: Mlp, critic2: Mlp) -> Self {
        Self {
            actor_opt: Adam::new(&actor),
            critic1_opt: Adam::new(&critic1),
            critic2_opt: Adam::new(&critic2),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Deterministic (maskless) action for one observation.
    pub fn act(&self, state: &[f64]) -> [f64; 2] {
        let out = self.actor.forward(state, None).expect("actor input width");
        [out[0].tanh(), out[1].tanh()]
    }

    /// Action with Gaussian exploration noise, clipped to the action box.
    pub fn explore<R: Rng + ?Sized>(&self, state: &[f64], std: f64, rng: &mut R) -> [f64; 2] {
        let a = self.act(state);
        a.map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            (v + std * z).clamp(-1.0, 1.0)
        })
    }

    pub fn is_finite(&self) -> bool {
        [&self.actor, &self.critic1, &self.critic2, &self.actor_target, &self.critic1_target, &self.critic2_target]
            .iter()
            .all(|n| n.is_finite())
    }

    /// TD targets for a batch using the target networks (maskless) with
    /// clipped target-policy smoothing.
    pub fn targets<R: Rng + ?Sized>(&self, batch: &Batch, cfg: &Td3Config, rng: &mut R) -> Vec<f64> {
        let mut next_a = actor_actions(&self.actor_target, &batch.next_states, None);
        next_a.apply(|v| {
            let z: f64 = rng.sample(StandardNormal);
            let eps = (cfg.target_noise * z).clamp(-cfg.target_noise_clip, cfg.target_noise_clip);
            *v = (*v + eps).clamp(-1.0, 1.0);
        });
        let x = critic_input(&batch.next_states, &next_a);
        let q1 = self.critic1_target.forward_batch(&x, None).expect("critic input width");
        let q2 = self.critic2_target.forward_batch(&x, None).expect("critic input width");
        (0..batch.len())
            .map(|j| td3_target(batch.rewards[j], cfg.gamma, q1[(0, j)], q2[(0, j)], batch.dones[j]))
            .collect()
    }

    fn critic_step<R: Rng + ?Sized>(
        critic: &mut Mlp,
        opt: &mut Adam,
        x: &DMatrix<f64>,
        y: &[f64],
        lr: f64,
        rng: &mut R,
    ) -> f64 {
        let n = y.len();
        let mask = BatchMask::sample(rng, critic, n);
        let (q, cache) = critic.forward_batch_cached(x, Some(&mask)).expect("critic input width");
        let mut loss = 0.0;
        let d_out = DMatrix::from_fn(1, n, |_, j| {
            let e = q[(0, j)] - y[j];
            loss += e * e;
            2.0 * e / n as f64
        });
        let (grads, _) = critic.backward_batch(&cache, &d_out).expect("cache shape");
        opt.step(critic, &grads, lr);
        loss / n as f64
    }

    /// One TD3 update: both critics every call, the actor and targets every
    /// `policy_delay` calls. Live networks run with fresh dropout masks.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, cfg: &Td3Config, rng: &mut R) -> UpdateStats {
        let y = self.targets(batch, cfg, rng);
        let x = critic_input(&batch.states, &batch.actions);
        let l1 = Self::critic_step(&mut self.critic1, &mut self.critic1_opt, &x, &y, cfg.critic_lr, rng);
        let l2 = Self::critic_step(&mut self.critic2, &mut self.critic2_opt, &x, &y, cfg.critic_lr, rng);
        self.updates += 1;

        let mut actor_loss = None;
        if self.updates % cfg.policy_delay.max(1) == 0 {
            actor_loss = Some(self.actor_step(batch, cfg, rng));
            self.actor_target.soft_update_from(&self.actor, cfg.tau);
            self.critic1_target.soft_update_from(&self.critic1, cfg.tau);
            self.critic2_target.soft_update_from(&self.critic2, cfg.tau);
        }
        UpdateStats { critic_loss: 0.5 * (l1 + l2), actor_loss }
    }

    /// Ascends `Q1(s, π(s))`; returns the actor loss `−mean Q1`.
    fn actor_step<R: Rng + ?Sized>(&mut self, batch: &Batch, cfg: &Td3Config, rng: &mut R) -> f64 {
        let n = batch.len();
        let ds = batch.states.nrows();
        let a_mask = BatchMask::sample(rng, &self.actor, n);
        let c_mask = BatchMask::sample(rng, &self.critic1, n);
        let (raw, a_cache) = self.actor.forward_batch_cached(&batch.states, Some(&a_mask)).expect("actor input width");
        let a = raw.map(f64::tanh);
        let x = critic_input(&batch.states, &a);
        let (q, c_cache) = self.critic1.forward_batch_cached(&x, Some(&c_mask)).expect("critic input width");
        let loss = -q.mean();
        let d_q = DMatrix::from_element(1, n, -1.0 / n as f64);
        let (_, d_x) = self.critic1.backward_batch(&c_cache, &d_q).expect("cache shape");
        let d_raw = DMatrix::from_fn(ACTION_DIM, n, |i, j| d_x[(ds + i, j)] * (1.0 - a[(i, j)] * a[(i, j)]));
        let (grads, _) = self.actor.backward_batch(&a_cache, &d_raw).expect("cache shape");
        self.actor_opt.step(&mut self.actor, &grads, cfg.actor_lr);
        loss
    }
}

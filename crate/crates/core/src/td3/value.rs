use nalgebra::DMatrix;

use crate::dynamics::VehicleState;
use crate::nn::{BatchMask, DropoutMask, Mlp};
use crate::world::LidarScan;

use super::agent::{actor_actions, critic_input, ACTION_DIM};
use super::mdp::{write_mdp_state, MdpConfig};

/// Dropout masks for one network hypothesis: `(actor, critic)`.
pub type MaskPair<'a> = (&'a DropoutMask, &'a DropoutMask);

/// `V(x, ℓ) = Q(s, π(s))` with `s` the normalised MDP observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub actor: Mlp,
    pub critic: Mlp,
    pub mdp: MdpConfig,
}

impl ValueFunction {
    pub fn new(actor: Mlp, critic: Mlp, mdp: MdpConfig) -> Self {
        debug_assert_eq!(actor.input_dim(), mdp.state_dim());
        debug_assert_eq!(critic.input_dim(), mdp.state_dim() + ACTION_DIM);
        Self { actor, critic, mdp }
    }

    pub fn state_dim(&self) -> usize {
        self.mdp.state_dim()
    }

    /// Fresh independent masks for the actor and the critic.
    pub fn sample_masks<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (DropoutMask, DropoutMask) {
        (DropoutMask::sample(rng, &self.actor), DropoutMask::sample(rng, &self.critic))
    }

    /// Value of a raw observation.
    pub fn value_of(&self, s: &[f64], masks: Option<MaskPair<'_>>) -> f64 {
        let raw = self.actor.forward(s, masks.map(|m| m.0)).expect("actor input width");
        let mut x = s.to_vec();
        x.extend(raw.iter().map(|v| v.tanh()));
        self.critic.forward(&x, masks.map(|m| m.1)).expect("critic input width")[0]
    }

    /// Values for observations stored column-per-sample.
    pub fn value_batch(&self, states: &DMatrix<f64>, masks: Option<(&BatchMask, &BatchMask)>) -> Vec<f64> {
        let a = actor_actions(&self.actor, states, masks.map(|m| m.0));
        let q = self.critic.forward_batch(&critic_input(states, &a), masks.map(|m| m.1)).expect("critic input width");
        q.iter().copied().collect()
    }

    pub fn observation(&self, x: &VehicleState, scan: &LidarScan, goal: &VehicleState) -> Vec<f64> {
        let mut s = vec![0.0; self.state_dim()];
        write_mdp_state(x, scan, goal, &self.mdp, &mut s);
        s
    }
}

pub fn evaluate_value(
    vf: &ValueFunction,
    x: &VehicleState,
    scan: &LidarScan,
    goal: &VehicleState,
    masks: Option<MaskPair<'_>>,
) -> f64 {
    vf.value_of(&vf.observation(x, scan, goal), masks)
}

//! Actor-critic training of the lidar-conditioned value function.

pub mod agent;
pub mod episode;
pub mod mdp;
pub mod replay;
pub mod train;
pub mod value;

pub use agent::{td3_target, Td3Agent, Td3Config, UpdateStats};
pub use episode::{run_episode, Episode, EpisodeConfig, EpisodeStepper, Termination};
pub use mdp::{mdp_state, reward, MdpConfig, MdpState};
pub use replay::{Batch, ReplayBuffer, TransitionSample};
pub use train::{load_value_function, save_checkpoint, train, TrainError, TrainOutcome, TrainSetup, TrainingMeta};
pub use value::{evaluate_value, ValueFunction};

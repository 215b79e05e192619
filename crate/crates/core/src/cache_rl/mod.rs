//! Cache allocation as an MDP solved by soft actor-critic.
//!
//! Actions are binary admit decisions over the slot's candidate contents.
//! The policy is a product of independent Bernoullis, one logit per
//! candidate; critics consume the action as a float vector.

mod action;
mod buffer;
mod curve;
mod reward;
mod sac;
mod state;

pub use action::{apply_action, ActionOutcome, Candidate};
pub use buffer::{ReplayBuffer, Transition};
pub use curve::{write_training_curve, CurveRow};
pub use reward::{reward, InnerLambda, RewardWeights, ServedRequest};
pub use sac::{
    greedy_from_logits, soft_update, ActionMode, LossReport, Net, SacAgent, SacConfig, SacLoss,
};
pub use state::{RlState, StateEncoder, StateInputs};

//! Risk-sensitive ensemble distributional soft actor-critic.

pub mod actor;
pub mod agent;
pub mod critic;
pub mod quantile;
pub mod replay;

pub use actor::{from_command, to_command, ActorNet, PolicySample};
pub use agent::{Agent, AgentConfig, StepNoise, TrainReport};
pub use critic::{mix, Member, QuantileNet, ACTION_DIM};
pub use quantile::{cvar, cvar_weights, member_loss, tau_hats};
pub use replay::{Batch, ReplayBuffer, Transition};

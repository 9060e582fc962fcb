//! Multi-UAV age-of-information simulation with a centralized-training,
//! decentralized-execution value-decomposition learner.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small tape-based reverse-mode differentiation engine, Adam,
//!   a finite-difference gradient oracle and parameter checkpoints.
//! - [`env`]: UAV kinematics, coverage, AoI accounting, observations and
//!   the graph adjacency over UAV and user nodes.
//! - [`encoder`]: the per-UAV recurrent policy with EdgeConv (or plain
//!   aggregation) message passing and a shared Q-head.
//! - [`mixer`]: the monotonic, permutation-invariant mixing network that
//!   exists only during training.
//! - [`trainer`]: replay, TD targets, target networks and the training loop.

pub mod encoder;
pub mod env;
pub mod error;
pub mod mixer;
pub mod nn;
pub mod trainer;

pub use encoder::{EncoderConfig, PolicyNetwork, Variant};
pub use env::{JointAction, ObservationSet, World, WorldConfig, WorldState};
pub use error::{Error, Result};
pub use mixer::{MixerConfig, MixerNetwork};
pub use nn::{AdamState, Graph, ParamId, ParamStore, Tensor, Var};
pub use trainer::{Learner, TrainConfig, Transition};

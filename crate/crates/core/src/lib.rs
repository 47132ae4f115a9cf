//! Core library for memory-augmented image-goal navigation in a procedural
//! 2D world: simulation, observation augmentation, a small differentiable
//! kernel set, reachability embeddings, gated memory buffers, an
//! attention-based policy, PPO training, and SPL evaluation.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod memory;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod reach;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

//! Reinforcement-learning workbench for a top-down gripper pushing task.

pub mod agents;
pub mod analysis;
pub mod env;
pub mod harness;
pub mod mdp;
pub mod obs;
pub mod par;
pub mod server;
pub mod tensor;

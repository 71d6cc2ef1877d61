//! Deep agents: DQN (optionally Double DQN), REINFORCE with and without a
//! baseline, semi-gradient SARSA, SARSA actor-critic, A2C and PPO-Clip, plus
//! their buffers, schedules and network builders.

pub mod actor_critic;
pub mod buffers;
pub mod dqn;
pub mod nets;
pub mod policy_gradient;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obs::Observation;
use crate::tensor::{Tensor, TensorError};

pub use actor_critic::{a2c_train_step, ppo_clip_objective, ppo_train_step, A2cStats, PpoStats};
pub use buffers::{compute_gae, ReplayBuffer, RolloutBuffer, RolloutStep};
pub use dqn::{dqn_targets, dqn_train_step, DqnLearner};
pub use nets::{ConvLayer, Head, NetSpec, Network, Trunk};
pub use policy_gradient::{
    reinforce_baseline_update, reinforce_update, sarsa_actor_critic_step, semi_gradient_sarsa_step,
    Episode,
};

pub const N_ACTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss ({0})")]
    NonFinite(String),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

/// Anything that can be laid out as one network input sample.
pub trait AsInput {
    fn input_len(&self) -> usize;
    fn write_input(&self, out: &mut Vec<f64>);
}

impl AsInput for Observation {
    fn input_len(&self) -> usize {
        self.numel()
    }

    fn write_input(&self, out: &mut Vec<f64>) {
        self.write_chw(out);
    }
}

impl AsInput for Vec<f64> {
    fn input_len(&self) -> usize {
        self.len()
    }

    fn write_input(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self);
    }
}

/// Stacks samples into a `[batch, sample_shape...]` tensor.
pub fn batch_input<S: AsInput>(items: &[&S], sample_shape: &[usize]) -> Result<Tensor> {
    let per: usize = sample_shape.iter().product();
    let mut data = Vec::with_capacity(per * items.len());
    for s in items {
        if s.input_len() != per {
            return Err(AgentError::Contract(format!(
                "input of {} values for a network expecting {sample_shape:?}",
                s.input_len()
            )));
        }
        s.write_input(&mut data);
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(sample_shape);
    Ok(Tensor::new(shape, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<S = Observation> {
    pub state: S,
    pub action: usize,
    pub reward: f64,
    pub next_state: S,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub final_eps: f64,
    pub fraction: f64,
    pub total_timesteps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, t: u64) -> f64 {
        let span = self.fraction * self.total_timesteps as f64;
        if span <= 0.0 {
            return self.final_eps;
        }
        let p = t as f64 / span;
        if p >= 1.0 {
            return self.final_eps;
        }
        self.initial + p * (self.final_eps - self.initial)
    }
}

/// Inverse-CDF sample from a probability row.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the total just below 1: fall back to the last positive entry
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub learning_rate: f64,
    pub buffer_size: usize,
    pub learning_starts: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub train_freq: u64,
    pub gradient_steps: u32,
    pub target_update_interval: u64,
    pub exploration_fraction: f64,
    pub exploration_initial_eps: f64,
    pub exploration_final_eps: f64,
    pub max_grad_norm: f64,
    pub double_dqn: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            learning_rate: 1e-4,
            buffer_size: 1_000_000,
            learning_starts: 50_000,
            batch_size: 32,
            gamma: 0.99,
            train_freq: 4,
            gradient_steps: 1,
            target_update_interval: 10_000,
            exploration_fraction: 0.1,
            exploration_initial_eps: 1.0,
            exploration_final_eps: 0.05,
            max_grad_norm: 10.0,
            double_dqn: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub clip_range_vf: Option<f64>,
    pub normalize_advantage: bool,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 3e-4,
            n_steps: 2048,
            batch_size: 64,
            n_epochs: 10,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            clip_range_vf: None,
            normalize_advantage: true,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2cConfig {
    pub learning_rate: f64,
    pub n_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub rms_prop_eps: f64,
    pub normalize_advantage: bool,
}

impl Default for A2cConfig {
    fn default() -> Self {
        A2cConfig {
            learning_rate: 7e-4,
            n_steps: 5,
            gamma: 0.99,
            gae_lambda: 1.0,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            rms_prop_eps: 1e-5,
            normalize_advantage: false,
        }
    }
}

/// Monte-Carlo policy gradient with a learned baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub policy_learning_rate: f64,
    pub value_learning_rate: f64,
    pub gamma: f64,
    pub baseline: bool,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            policy_learning_rate: 1e-4,
            value_learning_rate: 1e-3,
            gamma: 0.99,
            baseline: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub dqn: DqnConfig,
    pub ppo: PpoConfig,
    pub a2c: A2cConfig,
    pub reinforce: ReinforceConfig,
}

impl AgentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("agent config serializes")
    }
}

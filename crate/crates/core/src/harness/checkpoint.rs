//! Single-file training checkpoints.
//!
//! Layout (integers little-endian): `b"PGCKPT01"`, `u64` length + tensor
//! container (network parameters and optimizer moments), `u64` length + JSON
//! document (everything else), `u32` frame count, then per frame `u32` length
//! and raw bytes. Observations in the JSON refer to frames by index; frames
//! shared between observations are stored once.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Algo, HarnessError, Learner, MetricsRow, Recipe, Result, Trainer};
use crate::agents::actor_critic::{OnPolicyAlgo, OnPolicyLearner};
use crate::agents::policy_gradient::{Episode, ReinforceLearner};
use crate::agents::{
    DqnConfig, DqnLearner, EpsilonSchedule, NetSpec, Network, ReinforceConfig, ReplayBuffer,
    RolloutBuffer, RolloutStep, Transition,
};
use crate::env::Env;
use crate::obs::{AgentEnv, Observation};
use crate::tensor::{read_tensors, write_tensors, NamedTensor, OptimizerState, Tensor};

pub const MAGIC: &[u8; 8] = b"PGCKPT01";
const MAX_SECTION: u64 = 1 << 34;

#[derive(Default)]
struct FramePool {
    index: HashMap<usize, u32>,
    frames: Vec<Arc<[u8]>>,
}

impl FramePool {
    fn id(&mut self, f: &Arc<[u8]>) -> u32 {
        let key = f.as_ptr() as usize;
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.frames.len() as u32;
        self.frames.push(f.clone());
        self.index.insert(key, i);
        i
    }

    fn obs(&mut self, o: &Observation) -> ObsRef {
        ObsRef {
            frames: o.frames.iter().map(|f| self.id(f)).collect(),
            channels_per_frame: o.channels_per_frame,
            size: o.size,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ObsRef {
    frames: Vec<u32>,
    channels_per_frame: usize,
    size: usize,
}

impl ObsRef {
    fn resolve(&self, frames: &[Arc<[u8]>]) -> Result<Observation> {
        Ok(Observation {
            frames: resolve_frames(&self.frames, frames)?,
            channels_per_frame: self.channels_per_frame,
            size: self.size,
        })
    }
}

fn resolve_frames(ids: &[u32], frames: &[Arc<[u8]>]) -> Result<Vec<Arc<[u8]>>> {
    ids.iter()
        .map(|&i| {
            frames
                .get(i as usize)
                .cloned()
                .ok_or_else(|| corrupt(format!("frame index {i} out of range")))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TransitionRec {
    state: ObsRef,
    action: usize,
    reward: f64,
    next_state: ObsRef,
    terminated: bool,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
struct RolloutRec {
    state: ObsRef,
    action: usize,
    reward: f64,
    log_prob: f64,
    value: f64,
    next_value: Option<f64>,
    terminated: bool,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
enum LearnerRec {
    Dqn {
        cfg: DqnConfig,
        spec: NetSpec,
        opt: OptimizerState,
        schedule: EpsilonSchedule,
        num_timesteps: u64,
        n_updates: u64,
        last_loss: Option<f64>,
        capacity: usize,
        storage: Vec<TransitionRec>,
        next: usize,
        sampler: ChaCha8Rng,
    },
    OnPolicy {
        algo: OnPolicyAlgo,
        spec: NetSpec,
        opt: OptimizerState,
        steps: Vec<RolloutRec>,
        pending: Option<(f64, f64)>,
        n_updates: u64,
    },
    Reinforce {
        cfg: ReinforceConfig,
        policy_spec: NetSpec,
        value_spec: NetSpec,
        opt_policy: OptimizerState,
        opt_value: OptimizerState,
        states: Vec<ObsRef>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct TrainerRec {
    recipe: Recipe,
    algo: Algo,
    seed: u64,
    step: u64,
    episode_reward: f64,
    train_episodes: u64,
    rows: Vec<MetricsRow>,
    rng: ChaCha8Rng,
    env: Env,
    stack: Vec<u32>,
    learner: LearnerRec,
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Runtime(format!("corrupt checkpoint: {}", msg.into()))
}

/// Moves the optimizer moments into the tensor section; the returned copy
/// keeps only scalars.
fn stash_optimizer(
    opt: &OptimizerState,
    prefix: &str,
    tensors: &mut Vec<NamedTensor>,
) -> OptimizerState {
    for (kind, moments) in [("first", &opt.first), ("second", &opt.second)] {
        for (i, m) in moments.iter().enumerate() {
            let t = Tensor::new(vec![m.len()], m.clone()).expect("1-d moment");
            tensors.push(NamedTensor::new(format!("{prefix}{kind}.{i}"), t));
        }
    }
    OptimizerState {
        first: vec![],
        second: vec![],
        ..opt.clone()
    }
}

fn unstash_optimizer(
    mut opt: OptimizerState,
    prefix: &str,
    tensors: &[NamedTensor],
) -> OptimizerState {
    let collect = |kind: &str| -> Vec<Vec<f64>> {
        (0..)
            .map_while(|i| {
                let key = format!("{prefix}{kind}.{i}");
                tensors
                    .iter()
                    .find(|t| t.name == key)
                    .map(|t| t.tensor.data().to_vec())
            })
            .collect()
    };
    opt.first = collect("first");
    opt.second = collect("second");
    opt
}

fn rebuild_net(spec: NetSpec, prefix: &str, tensors: &[NamedTensor]) -> Result<Network> {
    let mut net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    net.load_named(prefix, tensors)?;
    Ok(net)
}

pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut pool = FramePool::default();
    let mut tensors = vec![];
    let stack = t.env.stack_frames().iter().map(|f| pool.id(f)).collect();
    let learner = match &t.learner {
        Learner::Dqn(l) => {
            tensors.extend(l.online.to_named("online/"));
            tensors.extend(l.target.to_named("target/"));
            let opt = stash_optimizer(&l.opt, "opt/", &mut tensors);
            let (slots, next, sampler) = l.buffer.raw();
            let storage = slots
                .iter()
                .map(|s| TransitionRec {
                    state: pool.obs(&s.state),
                    action: s.action,
                    reward: s.reward,
                    next_state: pool.obs(&s.next_state),
                    terminated: s.terminated,
                    truncated: s.truncated,
                })
                .collect();
            LearnerRec::Dqn {
                cfg: l.cfg.clone(),
                spec: l.online.spec().clone(),
                opt,
                schedule: l.schedule,
                num_timesteps: l.num_timesteps,
                n_updates: l.n_updates,
                last_loss: l.last_loss,
                capacity: l.buffer.capacity(),
                storage,
                next,
                sampler: sampler.clone(),
            }
        }
        Learner::OnPolicy(l) => {
            if l.rollout.advantages().is_some() {
                return Err(HarnessError::Runtime(
                    "checkpoint during an on-policy update".into(),
                ));
            }
            tensors.extend(l.net.to_named("net/"));
            let opt = stash_optimizer(&l.opt, "opt/", &mut tensors);
            let steps = l
                .rollout
                .steps
                .iter()
                .map(|s| RolloutRec {
                    state: pool.obs(&s.state),
                    action: s.action,
                    reward: s.reward,
                    log_prob: s.log_prob,
                    value: s.value,
                    next_value: s.next_value,
                    terminated: s.terminated,
                    truncated: s.truncated,
                })
                .collect();
            LearnerRec::OnPolicy {
                algo: l.algo.clone(),
                spec: l.net.spec().clone(),
                opt,
                steps,
                pending: l.pending,
                n_updates: l.n_updates,
            }
        }
        Learner::Reinforce(l) => {
            tensors.extend(l.policy.to_named("policy/"));
            tensors.extend(l.value.to_named("value/"));
            let opt_policy = stash_optimizer(&l.opt_policy, "opt_policy/", &mut tensors);
            let opt_value = stash_optimizer(&l.opt_value, "opt_value/", &mut tensors);
            LearnerRec::Reinforce {
                cfg: l.cfg.clone(),
                policy_spec: l.policy.spec().clone(),
                value_spec: l.value.spec().clone(),
                opt_policy,
                opt_value,
                states: l.episode.states.iter().map(|o| pool.obs(o)).collect(),
                actions: l.episode.actions.clone(),
                rewards: l.episode.rewards.clone(),
            }
        }
    };
    let rec = TrainerRec {
        recipe: t.recipe.clone(),
        algo: t.algo,
        seed: t.seed,
        step: t.step,
        episode_reward: t.episode_reward,
        train_episodes: t.train_episodes,
        rows: t.rows.clone(),
        rng: t.rng.clone(),
        env: t.env.env().clone(),
        stack,
        learner,
    };

    let mut tensor_bytes = vec![];
    write_tensors(&mut tensor_bytes, &tensors).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let json = serde_json::to_vec(&rec).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let mut out = Vec::with_capacity(tensor_bytes.len() + json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&tensor_bytes);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(pool.frames.len() as u32).to_le_bytes());
    for f in &pool.frames {
        out.extend_from_slice(&(f.len() as u32).to_le_bytes());
        out.extend_from_slice(f);
    }
    Ok(out)
}

fn read_section<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| corrupt(e.to_string()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_SECTION {
        return Err(corrupt(format!("section of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| corrupt(e.to_string()))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let tensors = read_tensors(&read_section(&mut r)?[..]).map_err(|e| corrupt(e.to_string()))?;
    let rec: TrainerRec =
        serde_json::from_slice(&read_section(&mut r)?).map_err(|e| corrupt(e.to_string()))?;
    let mut n = [0u8; 4];
    r.read_exact(&mut n).map_err(|e| corrupt(e.to_string()))?;
    let mut frames: Vec<Arc<[u8]>> = vec![];
    for _ in 0..u32::from_le_bytes(n) {
        r.read_exact(&mut n).map_err(|e| corrupt(e.to_string()))?;
        let len = u32::from_le_bytes(n) as usize;
        if len > r.len() {
            return Err(corrupt("truncated frame"));
        }
        let (f, rest) = r.split_at(len);
        frames.push(f.into());
        r = rest;
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes"));
    }

    let learner = match rec.learner {
        LearnerRec::Dqn {
            cfg,
            spec,
            opt,
            schedule,
            num_timesteps,
            n_updates,
            last_loss,
            capacity,
            storage,
            next,
            sampler,
        } => {
            let storage = storage
                .into_iter()
                .map(|s| {
                    Ok(Transition {
                        state: s.state.resolve(&frames)?,
                        action: s.action,
                        reward: s.reward,
                        next_state: s.next_state.resolve(&frames)?,
                        terminated: s.terminated,
                        truncated: s.truncated,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Learner::Dqn(DqnLearner {
                online: rebuild_net(spec.clone(), "online/", &tensors)?,
                target: rebuild_net(spec, "target/", &tensors)?,
                opt: unstash_optimizer(opt, "opt/", &tensors),
                buffer: ReplayBuffer::from_raw(capacity, storage, next, sampler)?,
                cfg,
                schedule,
                num_timesteps,
                n_updates,
                last_loss,
            })
        }
        LearnerRec::OnPolicy {
            algo,
            spec,
            opt,
            steps,
            pending,
            n_updates,
        } => {
            let mut rollout = RolloutBuffer::new();
            for s in steps {
                rollout.steps.push(RolloutStep {
                    state: s.state.resolve(&frames)?,
                    action: s.action,
                    reward: s.reward,
                    log_prob: s.log_prob,
                    value: s.value,
                    next_value: s.next_value,
                    terminated: s.terminated,
                    truncated: s.truncated,
                });
            }
            Learner::OnPolicy(OnPolicyLearner {
                algo,
                net: rebuild_net(spec, "net/", &tensors)?,
                opt: unstash_optimizer(opt, "opt/", &tensors),
                rollout,
                pending,
                n_updates,
            })
        }
        LearnerRec::Reinforce {
            cfg,
            policy_spec,
            value_spec,
            opt_policy,
            opt_value,
            states,
            actions,
            rewards,
        } => Learner::Reinforce(ReinforceLearner {
            cfg,
            policy: rebuild_net(policy_spec, "policy/", &tensors)?,
            value: rebuild_net(value_spec, "value/", &tensors)?,
            opt_policy: unstash_optimizer(opt_policy, "opt_policy/", &tensors),
            opt_value: unstash_optimizer(opt_value, "opt_value/", &tensors),
            episode: Episode {
                states: states
                    .iter()
                    .map(|o| o.resolve(&frames))
                    .collect::<Result<_>>()?,
                actions,
                rewards,
                complete: false,
            },
        }),
    };
    let env = AgentEnv::restore(rec.env, resolve_frames(&rec.stack, &frames)?);
    let obs = env.observation()?;
    Ok(Trainer {
        recipe: rec.recipe,
        algo: rec.algo,
        seed: rec.seed,
        env,
        obs,
        learner,
        rng: rec.rng,
        step: rec.step,
        episode_reward: rec.episode_reward,
        train_episodes: rec.train_episodes,
        rows: rec.rows,
    })
}

/// Writes atomically: a partial file never replaces a good checkpoint.
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(t)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path)
        .map_err(|e| HarnessError::Config(format!("checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

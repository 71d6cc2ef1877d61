use rand::Rng;

use super::nets::{NetSpec, Network};
use super::{
    batch_input, AgentError, AsInput, DqnConfig, EpsilonSchedule, ReplayBuffer, Result, Transition,
};
use crate::obs::Observation;
use crate::tensor::{clip_grad_norm, OptimizerState, Tape};

/// Bootstrap targets. `q_next_target` and `q_next_online` are `[batch * n]`
/// rows; with `q_next_online` given, the online network picks the action
/// and the target network evaluates it.
pub fn dqn_targets(
    rewards: &[f64],
    terminated: &[bool],
    q_next_target: &[f64],
    q_next_online: Option<&[f64]>,
    n: usize,
    gamma: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if terminated[i] {
                return r;
            }
            let row = &q_next_target[i * n..(i + 1) * n];
            let next = match q_next_online {
                Some(on) => row[crate::mdp::argmax(&on[i * n..(i + 1) * n])],
                None => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            r + gamma * next
        })
        .collect()
}

/// One gradient step on a sampled batch. The loss is the mean Huber loss of
/// the TD error, whose gradient is the TD error clipped to [-1, 1].
pub fn dqn_train_step<S: AsInput>(
    online: &mut Network,
    target: &Network,
    batch: &[&Transition<S>],
    opt: &mut OptimizerState,
    cfg: &DqnConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(AgentError::Contract("empty DQN batch".into()));
    }
    let shape = online.spec().input_shape();
    let n = online.spec().heads[0].outputs;
    let states: Vec<&S> = batch.iter().map(|t| &t.state).collect();
    let next: Vec<&S> = batch.iter().map(|t| &t.next_state).collect();
    let next_x = batch_input(&next, &shape)?;
    let q_next_target = target.infer(next_x.clone())?.remove(0);
    let q_next_online = if cfg.double_dqn {
        Some(online.infer(next_x)?.remove(0))
    } else {
        None
    };
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let term: Vec<bool> = batch.iter().map(|t| t.terminated).collect();
    let y = dqn_targets(
        &rewards,
        &term,
        q_next_target.data(),
        q_next_online.as_ref().map(|t| t.data()),
        n,
        cfg.gamma,
    );
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();

    let x = batch_input(&states, &shape)?;
    let (loss, grads) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = online.forward(&mut tape, xv)?;
        let q = tape.gather(f.heads[0], &actions)?;
        let yv = tape.constant(crate::tensor::Tensor::new(vec![y.len()], y)?);
        let d = tape.sub(q, yv)?;
        let c = tape.clip(d, -1.0, 1.0)?;
        let half = tape.scale(c, 0.5);
        let rest = tape.sub(d, half)?;
        let per = tape.mul(c, rest)?;
        let loss = tape.mean(per);
        tape.backward(loss)?;
        (tape.scalar(loss), online.tape_grads(&tape, &f))
    };
    if !loss.is_finite() {
        return Err(AgentError::NonFinite(format!("dqn loss {loss}")));
    }
    online.set_grads(&grads)?;
    clip_grad_norm(online.params_mut(), cfg.max_grad_norm);
    opt.step(online.params_mut())?;
    Ok(loss)
}

/// DQN with experience replay and a periodically synced target network.
#[derive(Clone, Debug)]
pub struct DqnLearner {
    pub cfg: DqnConfig,
    pub online: Network,
    pub target: Network,
    pub opt: OptimizerState,
    pub buffer: ReplayBuffer<Observation>,
    pub schedule: EpsilonSchedule,
    pub num_timesteps: u64,
    pub n_updates: u64,
    pub last_loss: Option<f64>,
}

impl DqnLearner {
    pub fn new<R: Rng + ?Sized>(
        spec: NetSpec,
        cfg: DqnConfig,
        total_timesteps: u64,
        buffer_seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let online = Network::new(spec, rng)?;
        let target = online.clone();
        Ok(DqnLearner {
            opt: OptimizerState::adam(cfg.learning_rate),
            buffer: ReplayBuffer::new(cfg.buffer_size, buffer_seed),
            schedule: EpsilonSchedule {
                initial: cfg.exploration_initial_eps,
                final_eps: cfg.exploration_final_eps,
                fraction: cfg.exploration_fraction,
                total_timesteps,
            },
            cfg,
            online,
            target,
            num_timesteps: 0,
            n_updates: 0,
            last_loss: None,
        })
    }

    pub fn q_values<S: AsInput>(&self, obs: &S) -> Result<Vec<f64>> {
        let x = batch_input(&[obs], &self.online.spec().input_shape())?;
        Ok(self.online.infer(x)?.remove(0).into_data())
    }

    pub fn greedy<S: AsInput>(&self, obs: &S) -> Result<usize> {
        Ok(crate::mdp::argmax(&self.q_values(obs)?))
    }

    /// Epsilon-greedy with the scheduled epsilon.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, rng: &mut R) -> Result<usize> {
        let eps = self.schedule.value(self.num_timesteps);
        if rng.gen::<f64>() < eps {
            Ok(rng.gen_range(0..self.online.spec().heads[0].outputs))
        } else {
            self.greedy(obs)
        }
    }

    /// Stores the transition, trains every `train_freq` steps once past
    /// `learning_starts`, and syncs the target network on schedule.
    pub fn observe(&mut self, t: Transition<Observation>) -> Result<()> {
        self.buffer.push(t);
        self.num_timesteps += 1;
        let c = &self.cfg;
        if self.num_timesteps >= c.learning_starts && self.num_timesteps % c.train_freq.max(1) == 0
        {
            for _ in 0..c.gradient_steps.max(1) {
                let idx = self.buffer.sample_indices(c.batch_size)?;
                let (slots, _, _) = self.buffer.raw();
                let batch: Vec<&Transition<Observation>> = idx.iter().map(|&i| &slots[i]).collect();
                let loss = dqn_train_step(
                    &mut self.online,
                    &self.target,
                    &batch,
                    &mut self.opt,
                    &self.cfg,
                )?;
                self.last_loss = Some(loss);
                self.n_updates += 1;
            }
        }
        if self.num_timesteps % self.cfg.target_update_interval.max(1) == 0 {
            self.target.copy_from(&self.online);
        }
        Ok(())
    }
}

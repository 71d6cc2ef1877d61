//! Synchronous advantage actor-critic and PPO-Clip on a two-headed network
//! (`pi` logits, `v` state value).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffers::{RolloutBuffer, RolloutStep};
use super::nets::{Forward, NetSpec, Network};
use super::{
    batch_input, sample_categorical, softmax_row, A2cConfig, AgentError, AsInput, PpoConfig, Result,
};
use crate::obs::Observation;
use crate::tensor::{clip_grad_norm, OptimizerState, Tape, Tensor, Var};

/// `min(r A, clip(r, 1-ε, 1+ε) A)`
pub fn ppo_clip_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Zero mean, unit (population) variance, variance floored at 1e-8.
pub fn normalize_advantages(a: &mut [f64]) {
    if a.is_empty() {
        return;
    }
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.max(1e-8).sqrt();
    a.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

fn constant(tape: &mut Tape<'_>, v: Vec<f64>) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![v.len()], v)?))
}

struct Heads {
    log_probs: Var,
    values: Var,
    entropy: Var,
}

fn policy_value_terms(tape: &mut Tape<'_>, f: &Forward, actions: &[usize]) -> Result<Heads> {
    let b = actions.len();
    let logits = f.heads[0];
    let lp = tape.log_softmax(logits)?;
    let p = tape.softmax(logits)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp);
    let entropy = tape.scale(s, -1.0 / b as f64);
    let log_probs = tape.gather(lp, actions)?;
    let values = tape.reshape(f.heads[1], &[b])?;
    Ok(Heads {
        log_probs,
        values,
        entropy,
    })
}

fn check_actor_critic(net: &Network) -> Result<()> {
    let h = &net.spec().heads;
    if h.len() != 2 || h[1].outputs != 1 {
        return Err(AgentError::Contract(
            "actor-critic network needs pi and v heads".into(),
        ));
    }
    Ok(())
}

fn finish_step(
    net: &mut Network,
    grads: &[Vec<f64>],
    max_norm: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    net.set_grads(grads)?;
    let norm = clip_grad_norm(net.params_mut(), max_norm);
    opt.step(net.params_mut())?;
    Ok(norm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct A2cStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// One joint update on a rollout, which is cleared afterwards. The rollout
/// must have every successor value filled in.
pub fn a2c_train_step<S: AsInput>(
    net: &mut Network,
    rollout: &mut RolloutBuffer<S>,
    opt: &mut OptimizerState,
    cfg: &A2cConfig,
) -> Result<A2cStats> {
    check_actor_critic(net)?;
    rollout.finish(cfg.gamma, cfg.gae_lambda)?;
    let mut adv = rollout.advantages().expect("finished").to_vec();
    if cfg.normalize_advantage {
        normalize_advantages(&mut adv);
    }
    let returns = rollout.returns().expect("finished").to_vec();
    let actions: Vec<usize> = rollout.steps.iter().map(|s| s.action).collect();
    let states: Vec<&S> = rollout.steps.iter().map(|s| &s.state).collect();
    let x = batch_input(&states, &net.spec().input_shape())?;

    let (stats, grads) = {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = net.forward(&mut tape, xv)?;
        let h = policy_value_terms(&mut tape, &f, &actions)?;
        let av = constant(&mut tape, adv)?;
        let weighted = tape.mul(av, h.log_probs)?;
        let m = tape.mean(weighted);
        let pl = tape.neg(m);
        let rv = constant(&mut tape, returns)?;
        let d = tape.sub(rv, h.values)?;
        let sq = tape.square(d);
        let vl = tape.mean(sq);
        let vterm = tape.scale(vl, cfg.vf_coef);
        let mut loss = tape.add(pl, vterm)?;
        if cfg.ent_coef != 0.0 {
            let e = tape.scale(h.entropy, -cfg.ent_coef);
            loss = tape.add(loss, e)?;
        }
        tape.backward(loss)?;
        let stats = A2cStats {
            policy_loss: tape.scalar(pl),
            value_loss: tape.scalar(vl),
            entropy: tape.scalar(h.entropy),
        };
        (stats, net.tape_grads(&tape, &f))
    };
    if !(stats.policy_loss.is_finite() && stats.value_loss.is_finite()) {
        return Err(AgentError::NonFinite(format!("a2c losses {stats:?}")));
    }
    finish_step(net, &grads, cfg.max_grad_norm, opt)?;
    rollout.clear();
    Ok(stats)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Mean clipped surrogate of the very first minibatch.
    pub first_surrogate: f64,
    pub minibatches: usize,
}

/// `n_epochs` passes of shuffled minibatch updates over a full rollout,
/// which is cleared afterwards.
pub fn ppo_train_step<S: AsInput, R: Rng + ?Sized>(
    net: &mut Network,
    rollout: &mut RolloutBuffer<S>,
    opt: &mut OptimizerState,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    check_actor_critic(net)?;
    if rollout.len() < cfg.batch_size || cfg.batch_size == 0 {
        return Err(AgentError::Contract(format!(
            "rollout of {} steps is smaller than batch size {}",
            rollout.len(),
            cfg.batch_size
        )));
    }
    rollout.finish(cfg.gamma, cfg.gae_lambda)?;
    let adv_all = rollout.advantages().expect("finished").to_vec();
    let ret_all = rollout.returns().expect("finished").to_vec();
    let shape = net.spec().input_shape();
    let mut stats = PpoStats::default();
    let mut clipped = 0usize;
    let mut seen = 0usize;
    let mut order: Vec<usize> = (0..rollout.len()).collect();
    for _ in 0..cfg.n_epochs {
        order.shuffle(rng);
        for mb in order.chunks(cfg.batch_size) {
            let steps: Vec<&RolloutStep<S>> = mb.iter().map(|&i| &rollout.steps[i]).collect();
            let states: Vec<&S> = steps.iter().map(|s| &s.state).collect();
            let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
            let old_lp: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
            let old_v: Vec<f64> = steps.iter().map(|s| s.value).collect();
            let mut adv: Vec<f64> = mb.iter().map(|&i| adv_all[i]).collect();
            if cfg.normalize_advantage && adv.len() > 1 {
                normalize_advantages(&mut adv);
            }
            let ret: Vec<f64> = mb.iter().map(|&i| ret_all[i]).collect();
            let x = batch_input(&states, &shape)?;

            let (grads, pl, vl, ent, surr, ratios) = {
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let f = net.forward(&mut tape, xv)?;
                let h = policy_value_terms(&mut tape, &f, &actions)?;
                let olp = constant(&mut tape, old_lp)?;
                let diff = tape.sub(h.log_probs, olp)?;
                let ratio = tape.exp(diff);
                let av = constant(&mut tape, adv)?;
                let s1 = tape.mul(ratio, av)?;
                let rc = tape.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)?;
                let s2 = tape.mul(rc, av)?;
                let s = tape.min(s1, s2)?;
                let surr = tape.mean(s);
                let pl = tape.neg(surr);
                let v_pred = match cfg.clip_range_vf {
                    None => h.values,
                    Some(c) => {
                        let ov = constant(&mut tape, old_v.clone())?;
                        let dv = tape.sub(h.values, ov)?;
                        let dc = tape.clip(dv, -c, c)?;
                        tape.add(ov, dc)?
                    }
                };
                let rv = constant(&mut tape, ret)?;
                let d = tape.sub(rv, v_pred)?;
                let sq = tape.square(d);
                let vl = tape.mean(sq);
                let vterm = tape.scale(vl, cfg.vf_coef);
                let mut loss = tape.add(pl, vterm)?;
                if cfg.ent_coef != 0.0 {
                    let e = tape.scale(h.entropy, -cfg.ent_coef);
                    loss = tape.add(loss, e)?;
                }
                tape.backward(loss)?;
                (
                    net.tape_grads(&tape, &f),
                    tape.scalar(pl),
                    tape.scalar(vl),
                    tape.scalar(h.entropy),
                    tape.scalar(surr),
                    tape.value(ratio).to_vec(),
                )
            };
            if !(pl.is_finite() && vl.is_finite()) {
                return Err(AgentError::NonFinite(format!(
                    "ppo losses policy {pl} value {vl}"
                )));
            }
            if stats.minibatches == 0 {
                stats.first_surrogate = surr;
            }
            clipped += ratios
                .iter()
                .filter(|r| (*r - 1.0).abs() > cfg.clip_range)
                .count();
            seen += ratios.len();
            stats.policy_loss = pl;
            stats.value_loss = vl;
            stats.entropy = ent;
            stats.minibatches += 1;
            finish_step(net, &grads, cfg.max_grad_norm, opt)?;
        }
    }
    stats.clip_fraction = clipped as f64 / seen.max(1) as f64;
    rollout.clear();
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OnPolicyAlgo {
    A2c(A2cConfig),
    Ppo(PpoConfig),
}

/// Collects rollouts with the current policy and updates A2C or PPO.
#[derive(Clone, Debug)]
pub struct OnPolicyLearner {
    pub algo: OnPolicyAlgo,
    pub net: Network,
    pub opt: OptimizerState,
    pub rollout: RolloutBuffer<Observation>,
    /// `(log π(a|s), v(s))` of the action chosen by the last `act`.
    pub pending: Option<(f64, f64)>,
    pub n_updates: u64,
}

impl OnPolicyLearner {
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, algo: OnPolicyAlgo, rng: &mut R) -> Result<Self> {
        let net = Network::new(spec, rng)?;
        check_actor_critic(&net)?;
        let opt = match &algo {
            OnPolicyAlgo::A2c(c) => OptimizerState::rmsprop(c.learning_rate, c.rms_prop_eps),
            OnPolicyAlgo::Ppo(c) => OptimizerState::adam(c.learning_rate),
        };
        Ok(OnPolicyLearner {
            algo,
            net,
            opt,
            rollout: RolloutBuffer::new(),
            pending: None,
            n_updates: 0,
        })
    }

    fn n_steps(&self) -> usize {
        match &self.algo {
            OnPolicyAlgo::A2c(c) => c.n_steps,
            OnPolicyAlgo::Ppo(c) => c.n_steps,
        }
    }

    /// `(probabilities, value)` for one observation.
    pub fn evaluate<S: AsInput>(&self, obs: &S) -> Result<(Vec<f64>, f64)> {
        let x = batch_input(&[obs], &self.net.spec().input_shape())?;
        let out = self.net.infer(x)?;
        Ok((softmax_row(out[0].data()), out[1].data()[0]))
    }

    pub fn greedy<S: AsInput>(&self, obs: &S) -> Result<usize> {
        Ok(crate::mdp::argmax(&self.evaluate(obs)?.0))
    }

    pub fn act<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<usize> {
        let (p, v) = self.evaluate(obs)?;
        let a = sample_categorical(&p, rng);
        self.pending = Some((p[a].ln(), v));
        Ok(a)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn observe<R: Rng + ?Sized>(
        &mut self,
        obs: Observation,
        action: usize,
        reward: f64,
        next_obs: &Observation,
        terminated: bool,
        truncated: bool,
        rng: &mut R,
    ) -> Result<()> {
        let (log_prob, value) = self
            .pending
            .take()
            .ok_or_else(|| AgentError::Contract("observe without a preceding act".into()))?;
        self.rollout.push(RolloutStep {
            state: obs,
            action,
            reward,
            log_prob,
            value,
            next_value: None,
            terminated,
            truncated,
        })?;
        let full = self.rollout.len() >= self.n_steps();
        if self.rollout.needs_bootstrap() && (truncated || full) {
            let v = self.evaluate(next_obs)?.1;
            self.rollout.set_last_next_value(v);
        }
        if full {
            match &self.algo {
                OnPolicyAlgo::A2c(c) => {
                    a2c_train_step(&mut self.net, &mut self.rollout, &mut self.opt, c)?;
                }
                OnPolicyAlgo::Ppo(c) => {
                    ppo_train_step(&mut self.net, &mut self.rollout, &mut self.opt, c, rng)?;
                }
            }
            self.n_updates += 1;
        }
        Ok(())
    }
}

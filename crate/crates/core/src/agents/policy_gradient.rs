//! Monte-Carlo and one-step policy-gradient updates, plus semi-gradient
//! SARSA for differentiable action-value approximators.

use rand::Rng;

use super::nets::{Forward, NetSpec, Network};
use super::{
    batch_input, sample_categorical, softmax_row, AgentError, AsInput, ReinforceConfig, Result,
    Transition,
};
use crate::obs::Observation;
use crate::tensor::{OptimizerState, Tape, Var};

/// A finished episode. `complete` must be set once the episode has ended.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<S = Observation> {
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub complete: bool,
}

impl<S> Default for Episode<S> {
    fn default() -> Self {
        Episode {
            states: vec![],
            actions: vec![],
            rewards: vec![],
            complete: false,
        }
    }
}

impl<S> Episode<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Discounted tail sums G_t.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.rewards.len()];
        let mut acc = 0.0;
        for t in (0..self.rewards.len()).rev() {
            acc = self.rewards[t] + gamma * acc;
            g[t] = acc;
        }
        g
    }

    fn check(&self) -> Result<()> {
        if !self.complete {
            return Err(AgentError::Contract(
                "policy-gradient update on an incomplete episode".into(),
            ));
        }
        if self.states.len() != self.actions.len() || self.states.len() != self.rewards.len() {
            return Err(AgentError::Contract(
                "episode fields have different lengths".into(),
            ));
        }
        Ok(())
    }
}

/// Value and gradient of a scalar built from `net`'s forward pass on `state`.
pub fn scalar_grad<S, F>(net: &Network, state: &S, f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    S: AsInput,
    F: for<'a> FnOnce(&mut Tape<'a>, &Forward) -> Result<Var>,
{
    let x = batch_input(&[state], &net.spec().input_shape())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fwd = net.forward(&mut tape, xv)?;
    let out = f(&mut tape, &fwd)?;
    tape.backward(out)?;
    Ok((tape.scalar(out), net.tape_grads(&tape, &fwd)))
}

fn log_prob_grad<S: AsInput>(
    policy: &Network,
    state: &S,
    action: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    scalar_grad(policy, state, |tape, f| {
        let lp = tape.log_softmax(f.heads[0])?;
        Ok(tape.gather(lp, &[action])?)
    })
}

fn head_value_grad<S: AsInput>(
    net: &Network,
    state: &S,
    index: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    scalar_grad(net, state, |tape, f| Ok(tape.gather(f.heads[0], &[index])?))
}

/// Descent step on `scale * grads`.
fn apply_scaled(
    net: &mut Network,
    grads: &[Vec<f64>],
    scale: f64,
    opt: &mut OptimizerState,
) -> Result<()> {
    let scaled: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| g.iter().map(|v| v * scale).collect())
        .collect();
    net.set_grads(&scaled)?;
    opt.step(net.params_mut())?;
    Ok(())
}

/// For each t in order: θ ← θ + α γ^t G_t ∇ln π(A_t|S_t, θ).
pub fn reinforce_update<S: AsInput>(
    policy: &mut Network,
    episode: &Episode<S>,
    opt: &mut OptimizerState,
    gamma: f64,
) -> Result<()> {
    episode.check()?;
    let g = episode.returns(gamma);
    let mut disc = 1.0;
    for t in 0..episode.len() {
        let (_, grads) = log_prob_grad(policy, &episode.states[t], episode.actions[t])?;
        apply_scaled(policy, &grads, -disc * g[t], opt)?;
        disc *= gamma;
    }
    Ok(())
}

/// REINFORCE with a learned state-value baseline.
pub fn reinforce_baseline_update<S: AsInput>(
    policy: &mut Network,
    value: &mut Network,
    episode: &Episode<S>,
    opt_policy: &mut OptimizerState,
    opt_value: &mut OptimizerState,
    gamma: f64,
) -> Result<()> {
    episode.check()?;
    let g = episode.returns(gamma);
    let mut disc = 1.0;
    for t in 0..episode.len() {
        let s = &episode.states[t];
        let (v, vgrads) = head_value_grad(value, s, 0)?;
        let delta = g[t] - v;
        apply_scaled(value, &vgrads, -delta, opt_value)?;
        let (_, pgrads) = log_prob_grad(policy, s, episode.actions[t])?;
        apply_scaled(policy, &pgrads, -disc * delta, opt_policy)?;
        disc *= gamma;
    }
    Ok(())
}

/// w ← w + α[R + γ q̂(S′,A′,w) − q̂(S,A,w)]∇q̂(S,A,w). `q` has one head with
/// one output per action. Returns the TD error.
pub fn semi_gradient_sarsa_step<S: AsInput>(
    q: &mut Network,
    t: &Transition<S>,
    next_action: usize,
    alpha: f64,
    gamma: f64,
) -> Result<f64> {
    let (q_sa, grads) = head_value_grad(q, &t.state, t.action)?;
    let target = if t.terminated {
        t.reward
    } else {
        let x = batch_input(&[&t.next_state], &q.spec().input_shape())?;
        t.reward + gamma * q.infer(x)?[0].data()[next_action]
    };
    let delta = target - q_sa;
    for (p, g) in q.params_mut().iter_mut().zip(&grads) {
        p.data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(w, gv)| *w += alpha * delta * gv);
    }
    Ok(delta)
}

/// One online SARSA actor-critic update; returns the next value of I (γI).
#[allow(clippy::too_many_arguments)]
pub fn sarsa_actor_critic_step<S: AsInput>(
    policy: &mut Network,
    q: &mut Network,
    t: &Transition<S>,
    next_action: usize,
    opt_policy: &mut OptimizerState,
    opt_q: &mut OptimizerState,
    gamma: f64,
    i: f64,
) -> Result<f64> {
    let (q_sa, qgrads) = head_value_grad(q, &t.state, t.action)?;
    let target = if t.terminated {
        t.reward
    } else {
        let x = batch_input(&[&t.next_state], &q.spec().input_shape())?;
        t.reward + gamma * q.infer(x)?[0].data()[next_action]
    };
    let delta = target - q_sa;
    apply_scaled(q, &qgrads, -delta, opt_q)?;
    let (_, pgrads) = log_prob_grad(policy, &t.state, t.action)?;
    apply_scaled(policy, &pgrads, -i * delta, opt_policy)?;
    Ok(gamma * i)
}

/// Episodic REINFORCE agent over image observations.
#[derive(Clone, Debug)]
pub struct ReinforceLearner {
    pub cfg: ReinforceConfig,
    pub policy: Network,
    pub value: Network,
    pub opt_policy: OptimizerState,
    pub opt_value: OptimizerState,
    pub episode: Episode<Observation>,
}

impl ReinforceLearner {
    /// `spec` must be an actor-critic spec; its heads are split into a
    /// policy network and a separate value network.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, cfg: ReinforceConfig, rng: &mut R) -> Result<Self> {
        let pick = |name: &str| -> Result<NetSpec> {
            let head = spec
                .heads
                .iter()
                .find(|h| h.name == name)
                .ok_or_else(|| AgentError::Contract(format!("spec has no {name} head")))?;
            Ok(NetSpec {
                trunk: spec.trunk.clone(),
                heads: vec![head.clone()],
            })
        };
        let policy = Network::new(pick("pi")?, rng)?;
        let value = Network::new(pick("v")?, rng)?;
        Ok(ReinforceLearner {
            opt_policy: OptimizerState::adam(cfg.policy_learning_rate),
            opt_value: OptimizerState::adam(cfg.value_learning_rate),
            cfg,
            policy,
            value,
            episode: Episode::default(),
        })
    }

    pub fn probs<S: AsInput>(&self, obs: &S) -> Result<Vec<f64>> {
        let x = batch_input(&[obs], &self.policy.spec().input_shape())?;
        Ok(softmax_row(self.policy.infer(x)?[0].data()))
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, rng: &mut R) -> Result<usize> {
        Ok(sample_categorical(&self.probs(obs)?, rng))
    }

    pub fn greedy<S: AsInput>(&self, obs: &S) -> Result<usize> {
        Ok(crate::mdp::argmax(&self.probs(obs)?))
    }

    pub fn observe(
        &mut self,
        obs: Observation,
        action: usize,
        reward: f64,
        done: bool,
    ) -> Result<()> {
        self.episode.states.push(obs);
        self.episode.actions.push(action);
        self.episode.rewards.push(reward);
        if done {
            self.episode.complete = true;
            let ep = std::mem::take(&mut self.episode);
            let g = self.cfg.gamma;
            if self.cfg.baseline {
                reinforce_baseline_update(
                    &mut self.policy,
                    &mut self.value,
                    &ep,
                    &mut self.opt_policy,
                    &mut self.opt_value,
                    g,
                )?;
            } else {
                reinforce_update(&mut self.policy, &ep, &mut self.opt_policy, g)?;
            }
            if self
                .policy
                .params()
                .iter()
                .any(|p| p.data().iter().any(|v| !v.is_finite()))
            {
                return Err(AgentError::NonFinite("reinforce policy parameters".into()));
            }
        }
        Ok(())
    }
}

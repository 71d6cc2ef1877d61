use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AgentError, Result, Transition};
use crate::obs::Observation;

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<S = Observation> {
    capacity: usize,
    storage: Vec<Transition<S>>,
    /// Slot that the next insertion overwrites once full.
    next: usize,
    rng: ChaCha8Rng,
}

impl<S> ReplayBuffer<S> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: Vec::new(),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Rebuilds a buffer from its raw parts (see [`ReplayBuffer::raw`]).
    pub fn from_raw(
        capacity: usize,
        storage: Vec<Transition<S>>,
        next: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if storage.len() > capacity || next >= capacity {
            return Err(AgentError::Contract(
                "replay buffer parts out of range".into(),
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            storage,
            next,
            rng,
        })
    }

    /// `(slots, next slot, sampler)`.
    pub fn raw(&self) -> (&[Transition<S>], usize, &ChaCha8Rng) {
        (&self.storage, self.next, &self.rng)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition<S>) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition<S>> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    /// `n` slot indices drawn uniformly with replacement.
    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.storage.is_empty() {
            return Err(AgentError::Contract(
                "sampling from an empty replay buffer".into(),
            ));
        }
        let len = self.storage.len();
        Ok((0..n).map(|_| self.rng.gen_range(0..len)).collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<Vec<&Transition<S>>> {
        let idx = self.sample_indices(n)?;
        Ok(idx.into_iter().map(|i| &self.storage[i]).collect())
    }
}

/// One on-policy step with what the behaviour policy computed for it.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep<S = Observation> {
    pub state: S,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
    /// Value of the successor state; `None` until known.
    pub next_value: Option<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer<S = Observation> {
    pub steps: Vec<RolloutStep<S>>,
    advantages: Option<Vec<f64>>,
    returns: Option<Vec<f64>>,
}

impl<S> Default for RolloutBuffer<S> {
    fn default() -> Self {
        RolloutBuffer {
            steps: Vec::new(),
            advantages: None,
            returns: None,
        }
    }
}

impl<S> RolloutBuffer<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends a step, completing the previous step's successor value when the
    /// two belong to the same episode.
    pub fn push(&mut self, step: RolloutStep<S>) -> Result<()> {
        if self.advantages.is_some() {
            return Err(AgentError::Contract("push into a closed rollout".into()));
        }
        if step.terminated && step.truncated {
            return Err(AgentError::Contract(
                "step both terminated and truncated".into(),
            ));
        }
        if let Some(prev) = self.steps.last_mut() {
            if prev.next_value.is_none() {
                if prev.truncated {
                    return Err(AgentError::Contract(
                        "truncated step pushed without its bootstrap value".into(),
                    ));
                }
                prev.next_value = Some(step.value);
            }
        }
        let mut step = step;
        if step.terminated {
            step.next_value = Some(0.0);
        }
        self.steps.push(step);
        Ok(())
    }

    /// Successor value of the newest step is still unknown.
    pub fn needs_bootstrap(&self) -> bool {
        self.steps.last().is_some_and(|s| s.next_value.is_none())
    }

    pub fn set_last_next_value(&mut self, v: f64) {
        if let Some(s) = self.steps.last_mut() {
            s.next_value = Some(v);
        }
    }

    /// Closes the segment and computes advantages and returns.
    pub fn finish(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.steps.is_empty() {
            return Err(AgentError::Contract("empty rollout".into()));
        }
        let mut next = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            next.push(
                s.next_value.ok_or_else(|| {
                    AgentError::Contract("rollout closed without bootstrap".into())
                })?,
            );
        }
        let rewards: Vec<f64> = self.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = self.steps.iter().map(|s| s.value).collect();
        let term: Vec<bool> = self.steps.iter().map(|s| s.terminated).collect();
        let end: Vec<bool> = self
            .steps
            .iter()
            .map(|s| s.terminated || s.truncated)
            .collect();
        let (a, r) = compute_gae(&rewards, &values, &next, &term, &end, gamma, lambda);
        self.advantages = Some(a);
        self.returns = Some(r);
        Ok(())
    }

    pub fn advantages(&self) -> Option<&[f64]> {
        self.advantages.as_deref()
    }

    pub fn returns(&self) -> Option<&[f64]> {
        self.returns.as_deref()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.advantages = None;
        self.returns = None;
    }
}

/// Generalized advantage estimation over a closed segment.
///
/// `next_values[t]` is the value of transition t's successor; it is ignored
/// when `terminated[t]`. `episode_end[t]` stops the backward accumulation.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let boot = if terminated[t] {
            0.0
        } else {
            gamma * next_values[t]
        };
        let delta = rewards[t] + boot - values[t];
        let carry = if episode_end[t] {
            0.0
        } else {
            gamma * lambda * acc
        };
        acc = delta + carry;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

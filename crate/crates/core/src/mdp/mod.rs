//! Finite MDPs: exact dynamic programming and tabular TD control.
//!
//! States are `0..n_states`; index `n_states` is the absorbing terminal state
//! with value zero. The same [`FiniteMdp`] is used as an expectation model by
//! the DP routines and as a sampling simulator by SARSA and Q-learning.

mod dp;
mod io;
mod td;

pub use dp::{
    greedy_improvement, policy_evaluation, policy_iteration, value_iteration, DP_SWEEP_CAP,
};
pub use io::{parse_mdp, write_mdp};
pub use td::{epsilon_greedy, q_learning, sarsa0, Simulator, EPISODE_STEP_CAP};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("probabilities for (s={state}, a={action}) sum to {sum}")]
    Probabilities {
        state: usize,
        action: usize,
        sum: f64,
    },
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("gamma = 1 but state {0} cannot reach the terminal state under any policy")]
    NoProperPolicy(usize),
    #[error("no convergence after {iterations} iterations (divergence guard)")]
    Divergence { iterations: usize },
    #[error("importance ratio undefined for behaviour probability {0}")]
    UndefinedRatio(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = MdpError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub reward: f64,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    dynamics: Vec<Vec<Outcome>>,
    start: Vec<f64>,
}

impl FiniteMdp {
    /// `dynamics[s * n_actions + a]` lists the outcomes of `(s, a)`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        dynamics: Vec<Vec<Outcome>>,
        start: Option<Vec<f64>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Invalid(
                "need at least one state and one action".into(),
            ));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(MdpError::Invalid(format!("gamma {gamma} outside [0, 1]")));
        }
        if dynamics.len() != n_states * n_actions {
            return Err(MdpError::Invalid(format!(
                "expected {} (s, a) entries, got {}",
                n_states * n_actions,
                dynamics.len()
            )));
        }
        for (i, outs) in dynamics.iter().enumerate() {
            let (s, a) = (i / n_actions, i % n_actions);
            if outs
                .iter()
                .any(|o| o.next > n_states || o.prob < 0.0 || !o.reward.is_finite())
            {
                return Err(MdpError::Invalid(format!("bad outcome for (s={s}, a={a})")));
            }
            let sum: f64 = outs.iter().map(|o| o.prob).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(MdpError::Probabilities {
                    state: s,
                    action: a,
                    sum,
                });
            }
        }
        let start = start.unwrap_or_else(|| vec![1.0 / n_states as f64; n_states]);
        if start.len() != n_states || start.iter().any(|&p| p < 0.0) {
            return Err(MdpError::Invalid(
                "start distribution has wrong length or negative mass".into(),
            ));
        }
        if (start.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(MdpError::Invalid(
                "start distribution does not sum to 1".into(),
            ));
        }
        let mdp = FiniteMdp {
            n_states,
            n_actions,
            gamma,
            dynamics,
            start,
        };
        if gamma == 1.0 {
            if let Some(s) = mdp.states_without_exit().first() {
                return Err(MdpError::NoProperPolicy(*s));
            }
        }
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn terminal(&self) -> usize {
        self.n_states
    }

    pub fn start_distribution(&self) -> &[f64] {
        &self.start
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.dynamics[s * self.n_actions + a]
    }

    /// Expected one-step backup `sum p(s',r|s,a) [r + gamma v(s')]`, with
    /// `v(terminal) = 0`.
    pub fn backup(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.outcomes(s, a)
            .iter()
            .map(|o| {
                let v = if o.next == self.n_states {
                    0.0
                } else {
                    values[o.next]
                };
                o.prob * (o.reward + self.gamma * v)
            })
            .sum()
    }

    /// States from which no policy can reach the terminal state.
    pub fn states_without_exit(&self) -> Vec<usize> {
        let mut reach = vec![false; self.n_states + 1];
        reach[self.n_states] = true;
        loop {
            let mut changed = false;
            for s in 0..self.n_states {
                if reach[s] {
                    continue;
                }
                let exits = (0..self.n_actions).any(|a| {
                    self.outcomes(s, a)
                        .iter()
                        .any(|o| o.prob > 0.0 && reach[o.next])
                });
                if exits {
                    reach[s] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        (0..self.n_states).filter(|&s| !reach[s]).collect()
    }

    /// True when every deterministic policy reaches the terminal state with
    /// probability one (no action choice can trap the process).
    pub fn every_policy_proper(&self) -> bool {
        // greatest set of states that some policy can keep the process inside
        let mut trap = vec![true; self.n_states + 1];
        trap[self.n_states] = false;
        loop {
            let mut changed = false;
            for s in 0..self.n_states {
                if !trap[s] {
                    continue;
                }
                let stays = (0..self.n_actions).any(|a| {
                    self.outcomes(s, a)
                        .iter()
                        .filter(|o| o.prob > 0.0)
                        .all(|o| trap[o.next])
                });
                if !stays {
                    trap[s] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        !trap.iter().any(|&t| t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        TabularPolicy {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    pub fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::Invalid("policy matrix has wrong size".into()));
        }
        for row in probs.chunks(n_actions) {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(MdpError::Invalid("policy row is not a distribution".into()));
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Most probable action per state (lowest index on ties).
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }
}

/// Action values with an explicit all-zero terminal row.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; (n_states + 1) * n_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Writes are ignored for the terminal row.
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        if s < self.n_states {
            self.values[s * self.n_actions + a] = v;
        }
    }

    pub fn terminal_row(&self) -> &[f64] {
        self.row(self.n_states)
    }

    pub fn state_values(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                self.row(s)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Discounted return `sum_k gamma^k r_k`; zero for an empty sequence.
pub fn compute_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |g, &r| r + gamma * g)
}

/// Mean squared value error weighted by `mu`.
pub fn msve(values_hat: &[f64], values_true: &[f64], mu: &[f64]) -> f64 {
    assert_eq!(values_hat.len(), values_true.len());
    assert_eq!(values_hat.len(), mu.len());
    values_hat
        .iter()
        .zip(values_true)
        .zip(mu)
        .map(|((h, t), m)| m * (t - h) * (t - h))
        .sum()
}

/// Per-step importance-sampling ratio `pi(a|s) / b(a|s)`.
pub fn importance_ratio(pi_prob: f64, b_prob: f64) -> Result<f64> {
    if b_prob <= 0.0 || !b_prob.is_finite() {
        return Err(MdpError::UndefinedRatio(b_prob));
    }
    Ok(pi_prob / b_prob)
}

/// Deterministic grid world. Actions are up, right, down, left; moves off the
/// grid leave the agent in place; every move costs `step_reward`; entering a
/// terminal cell ends the episode.
pub fn gridworld(
    rows: usize,
    cols: usize,
    terminals: &[(usize, usize)],
    step_reward: f64,
    gamma: f64,
) -> Result<GridWorld> {
    let mut index = vec![None; rows * cols];
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !terminals.contains(&(r, c)) {
                index[r * cols + c] = Some(cells.len());
                cells.push((r, c));
            }
        }
    }
    let n = cells.len();
    let mut dynamics = Vec::with_capacity(n * 4);
    for &(r, c) in &cells {
        for a in 0..4 {
            let (nr, nc) = match a {
                0 if r > 0 => (r - 1, c),
                1 if c + 1 < cols => (r, c + 1),
                2 if r + 1 < rows => (r + 1, c),
                3 if c > 0 => (r, c - 1),
                _ => (r, c),
            };
            let next = index[nr * cols + nc].unwrap_or(n);
            dynamics.push(vec![Outcome {
                next,
                reward: step_reward,
                prob: 1.0,
            }]);
        }
    }
    let mdp = FiniteMdp::new(n, 4, gamma, dynamics, None)?;
    Ok(GridWorld {
        mdp,
        cells,
        rows,
        cols,
    })
}

#[derive(Clone, Debug)]
pub struct GridWorld {
    pub mdp: FiniteMdp,
    /// Grid coordinates of each non-terminal state.
    pub cells: Vec<(usize, usize)>,
    pub rows: usize,
    pub cols: usize,
}

/// Random MDP with 1-3 outcomes per pair; used by cross-method checks.
pub fn random_mdp<R: Rng>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> FiniteMdp {
    let mut dynamics = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        let k = rng.gen_range(1..=3);
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        // make the sum exact
        let head: f64 = w[..k - 1].iter().sum();
        w[k - 1] = 1.0 - head;
        dynamics.push(
            w.into_iter()
                .map(|prob| Outcome {
                    next: rng.gen_range(0..=n_states),
                    reward: rng.gen_range(-1.0..1.0),
                    prob,
                })
                .collect(),
        );
    }
    FiniteMdp::new(n_states, n_actions, gamma, dynamics, None).expect("generated MDP is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn return_examples() {
        assert_eq!(compute_return(&[1.0, 1.0, 1.0], 0.0), 1.0);
        assert_eq!(compute_return(&[0.0, 0.0, 1.0], 0.5), 0.25);
        assert_eq!(compute_return(&[], 0.9), 0.0);
    }

    proptest! {
        #[test]
        fn return_recursion(rs in prop::collection::vec(-10.0f64..10.0, 1..20), g in 0.0f64..=1.0) {
            let full = compute_return(&rs, g);
            let tail = compute_return(&rs[1..], g);
            prop_assert_eq!(full, rs[0] + g * tail);
        }
    }

    #[test]
    fn msve_examples() {
        assert_eq!(msve(&[1.0, 2.0], &[1.0, 2.0], &[0.5, 0.5]), 0.0);
        assert_eq!(msve(&[0.0, 0.0], &[2.0, 999.0], &[1.0, 0.0]), 4.0);
        assert_eq!(msve(&[0.0; 4], &[1.0; 4], &[0.25; 4]), 1.0);
    }

    #[test]
    fn importance_ratio_examples() {
        assert_eq!(importance_ratio(0.4, 0.4).unwrap(), 1.0);
        assert!((importance_ratio(0.9, 0.3).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(importance_ratio(0.0, 0.7).unwrap(), 0.0);
        assert!(matches!(
            importance_ratio(0.5, 0.0),
            Err(MdpError::UndefinedRatio(_))
        ));
    }

    #[test]
    fn validation() {
        let bad = vec![vec![Outcome {
            next: 1,
            reward: 0.0,
            prob: 0.7,
        }]];
        assert!(matches!(
            FiniteMdp::new(1, 1, 0.9, bad, None),
            Err(MdpError::Probabilities { .. })
        ));
        // self-loop only: gamma 1 rejected, gamma < 1 fine
        let lp = vec![vec![Outcome {
            next: 0,
            reward: 1.0,
            prob: 1.0,
        }]];
        assert!(matches!(
            FiniteMdp::new(1, 1, 1.0, lp.clone(), None),
            Err(MdpError::NoProperPolicy(0))
        ));
        assert!(FiniteMdp::new(1, 1, 0.5, lp, None).is_ok());
    }

    #[test]
    fn properness_analysis() {
        let g = gridworld(4, 4, &[(0, 0), (3, 3)], -1.0, 1.0).unwrap();
        assert!(g.mdp.states_without_exit().is_empty());
        // bumping into a wall forever is possible
        assert!(!g.mdp.every_policy_proper());
        let chain = FiniteMdp::new(
            2,
            1,
            1.0,
            vec![
                vec![Outcome {
                    next: 1,
                    reward: 0.0,
                    prob: 1.0,
                }],
                vec![Outcome {
                    next: 2,
                    reward: 1.0,
                    prob: 1.0,
                }],
            ],
            None,
        )
        .unwrap();
        assert!(chain.every_policy_proper());
    }

    #[test]
    fn qtable_terminal_row_stays_zero() {
        let mut q = QTable::zeros(2, 2);
        q.set(2, 0, 5.0);
        q.set(0, 1, 3.0);
        assert_eq!(q.terminal_row(), &[0.0, 0.0]);
        assert_eq!(q.greedy_actions(), vec![1, 0]);
    }
}

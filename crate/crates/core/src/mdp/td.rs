use rand::Rng;

use super::{argmax, FiniteMdp, QTable};

/// Episodes longer than this are cut off (the update still uses the
/// bootstrapped value of the last state).
pub const EPISODE_STEP_CAP: usize = 100_000;

/// Sampling interface over a [`FiniteMdp`].
pub struct Simulator<'m> {
    mdp: &'m FiniteMdp,
    state: usize,
}

impl<'m> Simulator<'m> {
    pub fn new(mdp: &'m FiniteMdp) -> Self {
        Simulator {
            mdp,
            state: mdp.terminal(),
        }
    }

    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> usize {
        self.state = sample_index(self.mdp.start_distribution(), rng);
        self.state
    }

    /// Returns `(next_state, reward, terminated)`.
    pub fn step<R: Rng>(&mut self, action: usize, rng: &mut R) -> (usize, f64, bool) {
        assert!(
            self.state < self.mdp.terminal(),
            "step called on a finished episode"
        );
        let outs = self.mdp.outcomes(self.state, action);
        let probs: Vec<f64> = outs.iter().map(|o| o.prob).collect();
        let o = outs[sample_index(&probs, rng)];
        self.state = o.next;
        (o.next, o.reward, o.next == self.mdp.terminal())
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding leftovers go to the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Uniform random action with probability `epsilon`, otherwise the greedy
/// action (lowest index on ties).
pub fn epsilon_greedy<R: Rng>(q_row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q_row.len())
    } else {
        argmax(q_row)
    }
}

/// On-policy TD control: `Q(S,A) += alpha [R + gamma Q(S',A') - Q(S,A)]`.
pub fn sarsa0<R: Rng>(
    mdp: &FiniteMdp,
    episodes: usize,
    alpha: f64,
    epsilon: f64,
    rng: &mut R,
) -> QTable {
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let mut sim = Simulator::new(mdp);
    let g = mdp.gamma();
    for _ in 0..episodes {
        let mut s = sim.reset(rng);
        let mut a = epsilon_greedy(q.row(s), epsilon, rng);
        for _ in 0..EPISODE_STEP_CAP {
            let (s2, r, done) = sim.step(a, rng);
            let a2 = if done {
                0
            } else {
                epsilon_greedy(q.row(s2), epsilon, rng)
            };
            let target = r + g * q.get(s2, a2);
            let old = q.get(s, a);
            q.set(s, a, old + alpha * (target - old));
            if done {
                break;
            }
            s = s2;
            a = a2;
        }
    }
    q
}

/// Off-policy TD control: `Q(S,A) += alpha [R + gamma max_a Q(S',a) - Q(S,A)]`.
pub fn q_learning<R: Rng>(
    mdp: &FiniteMdp,
    episodes: usize,
    alpha: f64,
    epsilon: f64,
    rng: &mut R,
) -> QTable {
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let mut sim = Simulator::new(mdp);
    let g = mdp.gamma();
    for _ in 0..episodes {
        let mut s = sim.reset(rng);
        for _ in 0..EPISODE_STEP_CAP {
            let a = epsilon_greedy(q.row(s), epsilon, rng);
            let (s2, r, done) = sim.step(a, rng);
            let best = q.row(s2).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let old = q.get(s, a);
            q.set(s, a, old + alpha * (r + g * best - old));
            if done {
                break;
            }
            s = s2;
        }
    }
    q
}

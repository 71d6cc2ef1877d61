//! Reward functions. Terminal bonuses: success +100, failure -100 (sparse and
//! step-penalty use their own unit values).

use serde::{Deserialize, Serialize};

pub const TERMINAL_REWARD: f64 = 100.0;
pub const BUDGET: f64 = 100.0;
pub const W_GT: f64 = 0.15;
pub const W_GTT: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFunc {
    Sparse,
    Shaped1,
    Budget,
    Complex,
    StepPenalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
    Ongoing,
}

/// `d_gt`: gripper jaw to goal object; `d_gtt`: goal object to target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub d_gt: f64,
    pub d_gtt: f64,
}

impl Distances {
    pub fn total(&self) -> f64 {
        self.d_gt + self.d_gtt
    }
}

pub fn reward_sparse(outcome: Outcome) -> f64 {
    match outcome {
        Outcome::Success => 1.0,
        Outcome::Failure => -1.0,
        Outcome::Ongoing => 0.0,
    }
}

pub fn reward_shaped1(outcome: Outcome, prev: Distances, next: Distances) -> f64 {
    match outcome {
        Outcome::Success => TERMINAL_REWARD,
        Outcome::Failure => -TERMINAL_REWARD,
        Outcome::Ongoing => {
            let gt = next.d_gt < prev.d_gt;
            let gtt = next.d_gtt < prev.d_gtt;
            match (gt, gtt) {
                (true, true) => 2.0,
                (true, false) | (false, true) => 1.0,
                (false, false) => -1.0,
            }
        }
    }
}

/// Returns the reward and the updated best total distance.
pub fn reward_budget(
    outcome: Outcome,
    best_total: f64,
    next_total: f64,
    initial_total: f64,
) -> (f64, f64) {
    let best = best_total.min(next_total);
    let r = match outcome {
        Outcome::Success => TERMINAL_REWARD,
        Outcome::Failure => -TERMINAL_REWARD,
        Outcome::Ongoing if next_total < best_total => {
            (best_total - next_total) * BUDGET / initial_total
        }
        Outcome::Ongoing => 0.0,
    };
    (r, best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexParams {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for ComplexParams {
    fn default() -> Self {
        ComplexParams {
            r_min: -2.0,
            r_max: 2.0,
        }
    }
}

/// `best` holds the per-component minima before this step.
pub fn reward_complex(
    outcome: Outcome,
    best: Distances,
    next: Distances,
    notmoving: u32,
    p: ComplexParams,
) -> f64 {
    match outcome {
        Outcome::Success => TERMINAL_REWARD,
        Outcome::Failure => -TERMINAL_REWARD,
        Outcome::Ongoing => {
            let r = -0.33 - 0.5 * notmoving as f64
                + W_GT * (best.d_gt - next.d_gt)
                + W_GTT * (best.d_gtt - next.d_gtt);
            (2.0 * (r - p.r_min) / (p.r_max - p.r_min)).clamp(-1.0, 1.0)
        }
    }
}

pub fn reward_step_penalty(outcome: Outcome) -> f64 {
    match outcome {
        Outcome::Success => 1.0,
        Outcome::Failure | Outcome::Ongoing => -1.0,
    }
}

/// Per-episode bookkeeping shared by the shaped rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTracker {
    pub initial: Distances,
    pub prev: Distances,
    /// Per-component minima seen this episode.
    pub best: Distances,
    pub best_total: f64,
    pub notmoving: u32,
}

impl RewardTracker {
    pub fn new(initial: Distances) -> Self {
        RewardTracker {
            initial,
            prev: initial,
            best: initial,
            best_total: initial.total(),
            notmoving: 0,
        }
    }

    /// Computes the reward for the transition into `next` and updates the
    /// bookkeeping. `stationary` says whether gripper and goal stood still.
    pub fn step(
        &mut self,
        func: RewardFunc,
        outcome: Outcome,
        next: Distances,
        stationary: bool,
        p: ComplexParams,
    ) -> f64 {
        let r = match func {
            RewardFunc::Sparse => reward_sparse(outcome),
            RewardFunc::Shaped1 => reward_shaped1(outcome, self.prev, next),
            RewardFunc::Budget => {
                let (r, best) =
                    reward_budget(outcome, self.best_total, next.total(), self.initial.total());
                self.best_total = best;
                r
            }
            RewardFunc::Complex => reward_complex(outcome, self.best, next, self.notmoving, p),
            RewardFunc::StepPenalty => reward_step_penalty(outcome),
        };
        if func != RewardFunc::Budget {
            self.best_total = self.best_total.min(next.total());
        }
        self.best.d_gt = self.best.d_gt.min(next.d_gt);
        self.best.d_gtt = self.best.d_gtt.min(next.d_gtt);
        self.notmoving = if stationary { self.notmoving + 1 } else { 0 };
        self.prev = next;
        r
    }
}

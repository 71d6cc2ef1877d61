//! Brute-force search for reward-exploiting action cycles.

use crate::env::{Action, Env, EnvError};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutcome {
    pub script: Vec<Action>,
    pub total_reward: f64,
    pub steps: u32,
    pub success: bool,
    pub failure: bool,
}

impl CycleOutcome {
    /// Positive return without ever completing the task.
    pub fn is_exploit(&self) -> bool {
        !self.success && !self.failure && self.total_reward > 0.0
    }
}

/// Runs `script` cyclically from the state of `start` (an env right after
/// reset) until the episode ends.
pub fn run_cycle(start: &Env, script: &[Action]) -> Result<CycleOutcome, EnvError> {
    let mut env = start.clone();
    let mut total = 0.0;
    let mut t = 0usize;
    loop {
        let s = env.advance(script[t % script.len()])?;
        total += s.reward;
        t += 1;
        if s.terminated || s.truncated {
            return Ok(CycleOutcome {
                script: script.to_vec(),
                total_reward: total,
                steps: s.info.episode_timestep,
                success: s.info.success,
                failure: s.terminated && !s.info.success,
            });
        }
    }
}

/// Digits of `index` in base 4, most significant first.
fn decode(mut index: usize, len: usize) -> Vec<usize> {
    let mut d = vec![0; len];
    for slot in d.iter_mut().rev() {
        *slot = index % 4;
        index /= 4;
    }
    d
}

/// Lexicographically smallest rotation that is not a repetition of a
/// shorter word: one representative per distinct cyclic script.
fn is_necklace_representative(d: &[usize]) -> bool {
    let n = d.len();
    for r in 1..n {
        let rotated = d[r..].iter().chain(&d[..r]);
        match rotated.cmp(d.iter()) {
            std::cmp::Ordering::Less => return false,
            std::cmp::Ordering::Equal => return false,
            std::cmp::Ordering::Greater => {}
        }
    }
    true
}

/// All distinct cyclic scripts of length `len`.
pub fn cyclic_scripts(len: usize) -> Vec<Vec<Action>> {
    (0..4usize.pow(len as u32))
        .map(|i| decode(i, len))
        .filter(|d| is_necklace_representative(d))
        .map(|d| {
            d.into_iter()
                .map(|a| Action::from_index(a).expect("digit < 4"))
                .collect()
        })
        .collect()
}

/// Searches cyclic scripts of length 1..=`max_len` in order and returns the
/// first exploit, plus the number of scripts evaluated.
pub fn find_exploit(
    start: &Env,
    max_len: usize,
) -> Result<(Option<CycleOutcome>, usize), EnvError> {
    let mut evaluated = 0;
    for len in 1..=max_len {
        let scripts = cyclic_scripts(len);
        evaluated += scripts.len();
        let outcomes = par::map_range(scripts.len(), |i| run_cycle(start, &scripts[i]));
        for o in outcomes {
            let o = o?;
            if o.is_exploit() {
                return Ok((Some(o), evaluated));
            }
        }
    }
    Ok((None, evaluated))
}

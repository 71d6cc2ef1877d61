use super::{FiniteMdp, MdpError, Result, TabularPolicy};

/// Upper bound on evaluation sweeps; exceeding it is reported as divergence.
pub const DP_SWEEP_CAP: usize = 1_000_000;

/// Iterative policy evaluation with in-place sweeps.
///
/// Stops once the largest change in a sweep is below `tolerance`. With
/// `gamma = 1` an improper policy makes values grow without bound, which is
/// reported as [`MdpError::Divergence`].
pub fn policy_evaluation(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    tolerance: f64,
) -> Result<Vec<f64>> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    for sweep in 0..DP_SWEEP_CAP {
        let mut delta = 0.0f64;
        for s in 0..n {
            let new: f64 = (0..mdp.n_actions())
                .filter(|&a| policy.prob(s, a) > 0.0)
                .map(|a| policy.prob(s, a) * mdp.backup(s, a, &v))
                .sum();
            delta = delta.max((new - v[s]).abs());
            v[s] = new;
        }
        if !delta.is_finite() || v.iter().any(|x| x.abs() > 1e12) {
            return Err(MdpError::Divergence {
                iterations: sweep + 1,
            });
        }
        if delta < tolerance {
            return Ok(v);
        }
    }
    Err(MdpError::Divergence {
        iterations: DP_SWEEP_CAP,
    })
}

/// Deterministic greedy policy with respect to `values`; ties go to the
/// lowest action index.
pub fn greedy_improvement(mdp: &FiniteMdp, values: &[f64]) -> TabularPolicy {
    let actions: Vec<usize> = (0..mdp.n_states())
        .map(|s| greedy_action(mdp, s, values))
        .collect();
    TabularPolicy::deterministic(&actions, mdp.n_actions())
}

fn greedy_action(mdp: &FiniteMdp, s: usize, values: &[f64]) -> usize {
    let q: Vec<f64> = (0..mdp.n_actions())
        .map(|a| mdp.backup(s, a, values))
        .collect();
    super::argmax(&q)
}

/// Alternates evaluation and greedy improvement until the policy is stable.
///
/// The initial policy is uniform random, which is proper whenever any proper
/// policy exists. An action is only replaced when another one is better by
/// more than the evaluation tolerance, so near-ties cannot cycle.
pub fn policy_iteration(mdp: &FiniteMdp, tolerance: f64) -> Result<(TabularPolicy, Vec<f64>)> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let mut policy = TabularPolicy::uniform(n, na);
    let mut current: Option<Vec<usize>> = None;
    let cap = 10 * n * na + 10;
    for _ in 0..cap {
        let v = policy_evaluation(mdp, &policy, tolerance)?;
        let mut next = Vec::with_capacity(n);
        for s in 0..n {
            let q: Vec<f64> = (0..na).map(|a| mdp.backup(s, a, &v)).collect();
            let best = super::argmax(&q);
            let keep = current
                .as_ref()
                .map(|c| c[s])
                .filter(|&a| q[a] >= q[best] - tolerance);
            next.push(keep.unwrap_or(best));
        }
        if current.as_ref() == Some(&next) {
            // final evaluation of the stable policy to full precision
            let v = policy_evaluation(mdp, &policy, stop_scale(mdp.gamma()) * tolerance * 0.5)?;
            let greedy = greedy_improvement(mdp, &v);
            return Ok((greedy, v));
        }
        policy = TabularPolicy::deterministic(&next, na);
        current = Some(next);
    }
    Err(MdpError::Divergence { iterations: cap })
}

/// `1 - gamma` for discounted problems, 1 when `gamma = 1`.
fn stop_scale(gamma: f64) -> f64 {
    if gamma < 1.0 {
        1.0 - gamma
    } else {
        1.0
    }
}

/// Value iteration with in-place Bellman optimality sweeps, followed by
/// greedy extraction.
///
/// For `gamma < 1` sweeping stops once `gamma * delta < (1 - gamma) * tolerance`,
/// which bounds the distance to `v*` by `tolerance`.
pub fn value_iteration(mdp: &FiniteMdp, tolerance: f64) -> Result<(Vec<f64>, TabularPolicy)> {
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    for sweep in 0..DP_SWEEP_CAP {
        let mut delta = 0.0f64;
        for s in 0..n {
            let best = (0..mdp.n_actions())
                .map(|a| mdp.backup(s, a, &v))
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if !delta.is_finite() {
            return Err(MdpError::Divergence {
                iterations: sweep + 1,
            });
        }
        if delta * mdp.gamma() < stop_scale(mdp.gamma()) * tolerance {
            let policy = greedy_improvement(mdp, &v);
            return Ok((v, policy));
        }
    }
    Err(MdpError::Divergence {
        iterations: DP_SWEEP_CAP,
    })
}

fn check_policy(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states() != mdp.n_states() || policy.row(0).len() != mdp.n_actions() {
        return Err(MdpError::Invalid("policy shape does not match MDP".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sutton_grid() -> GridWorld {
        gridworld(4, 4, &[(0, 0), (3, 3)], -1.0, 1.0).unwrap()
    }

    #[test]
    fn equiprobable_gridworld_values() {
        let g = sutton_grid();
        let v = policy_evaluation(&g.mdp, &TabularPolicy::uniform(14, 4), 1e-10).unwrap();
        let expected = [
            [0.0, -14.0, -20.0, -22.0],
            [-14.0, -18.0, -20.0, -20.0],
            [-20.0, -20.0, -18.0, -14.0],
            [-22.0, -20.0, -14.0, 0.0],
        ];
        for (i, &(r, c)) in g.cells.iter().enumerate() {
            assert!(
                (v[i] - expected[r][c]).abs() < 1e-6,
                "cell ({r},{c}): {}",
                v[i]
            );
        }
    }

    #[test]
    fn improper_policy_diverges() {
        let g = sutton_grid();
        // always move up: the top row bumps the wall forever
        let pi = TabularPolicy::deterministic(&vec![0; 14], 4);
        assert!(matches!(
            policy_evaluation(&g.mdp, &pi, 1e-8),
            Err(MdpError::Divergence { .. })
        ));
    }

    #[test]
    fn optimal_gridworld() {
        let g = sutton_grid();
        let (pi, v) = policy_iteration(&g.mdp, 1e-10).unwrap();
        let (v2, pi2) = value_iteration(&g.mdp, 1e-10).unwrap();
        for (i, &(r, c)) in g.cells.iter().enumerate() {
            let steps = (r + c).min(6 - r - c) as f64;
            assert!((v[i] + steps).abs() < 1e-8);
            assert!((v2[i] + steps).abs() < 1e-8);
        }
        assert_eq!(pi, pi2);
    }

    #[test]
    fn pi_and_vi_agree_on_random_mdps() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(6, 3, 0.9, &mut rng);
            let tol = 1e-9;
            let (pi, v) = policy_iteration(&mdp, tol).unwrap();
            let (v2, pi2) = value_iteration(&mdp, tol).unwrap();
            let worst = v
                .iter()
                .zip(&v2)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-7, "seed {seed}: {worst}");
            assert_eq!(pi.greedy_actions(), pi2.greedy_actions(), "seed {seed}");
        }
    }
}

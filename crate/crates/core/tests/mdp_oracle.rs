use std::collections::VecDeque;

use proptest::prelude::*;
use pushgym::mdp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(next: usize, reward: f64) -> Vec<Outcome> {
    vec![Outcome {
        next,
        reward,
        prob: 1.0,
    }]
}

/// Dense Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Exact vπ from (I - γ Pπ) v = rπ.
fn linear_values(mdp: &FiniteMdp, pi: &TabularPolicy) -> Vec<f64> {
    let n = mdp.n_states();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s][s] += 1.0;
        for act in 0..mdp.n_actions() {
            let w = pi.prob(s, act);
            for o in mdp.outcomes(s, act) {
                b[s] += w * o.prob * o.reward;
                if o.next < n {
                    a[s][o.next] -= mdp.gamma() * w * o.prob;
                }
            }
        }
    }
    solve(a, b)
}

/// Shortest path lengths to the nearest terminal cell by BFS on the grid.
fn bfs_steps(rows: usize, cols: usize, terminals: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut dist = vec![vec![usize::MAX; cols]; rows];
    let mut q = VecDeque::new();
    for &(r, c) in terminals {
        dist[r][c] = 0;
        q.push_back((r, c));
    }
    while let Some((r, c)) = q.pop_front() {
        let d = dist[r][c];
        let mut nb = vec![];
        if r > 0 {
            nb.push((r - 1, c));
        }
        if r + 1 < rows {
            nb.push((r + 1, c));
        }
        if c > 0 {
            nb.push((r, c - 1));
        }
        if c + 1 < cols {
            nb.push((r, c + 1));
        }
        for (nr, nc) in nb {
            if dist[nr][nc] == usize::MAX {
                dist[nr][nc] = d + 1;
                q.push_back((nr, nc));
            }
        }
    }
    dist
}

/// Optimal action sets from exact q* of a deterministic grid.
fn optimal_action_sets(g: &GridWorld, vstar: &[f64]) -> Vec<Vec<usize>> {
    (0..g.mdp.n_states())
        .map(|s| {
            let q: Vec<f64> = (0..4).map(|a| g.mdp.backup(s, a, vstar)).collect();
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..4).filter(|&a| q[a] > best - 1e-9).collect()
        })
        .collect()
}

fn sutton_grid() -> GridWorld {
    gridworld(4, 4, &[(0, 0), (3, 3)], -1.0, 1.0).unwrap()
}

#[test]
fn evaluation_single_step_episode() {
    for gamma in [0.0, 0.5, 1.0] {
        let mdp = FiniteMdp::new(1, 1, gamma, vec![det(1, 1.0)], None).unwrap();
        let v = policy_evaluation(&mdp, &TabularPolicy::uniform(1, 1), 1e-12).unwrap();
        assert_eq!(v, vec![1.0]);
    }
}

#[test]
fn evaluation_three_state_chain() {
    let mdp = FiniteMdp::new(3, 1, 0.5, vec![det(1, 1.0), det(2, 1.0), det(3, 1.0)], None).unwrap();
    let v = policy_evaluation(&mdp, &TabularPolicy::uniform(3, 1), 1e-12).unwrap();
    let exact = linear_values(&mdp, &TabularPolicy::uniform(3, 1));
    assert!((exact[0] - 1.75).abs() < 1e-12);
    assert!((v[0] - 1.75).abs() < 1e-10);
}

#[test]
fn evaluation_matches_linear_solve() {
    // 2x2 grid with one terminal corner
    let g = gridworld(2, 2, &[(0, 0)], -1.0, 1.0).unwrap();
    let pi = TabularPolicy::uniform(g.mdp.n_states(), 4);
    let v = policy_evaluation(&g.mdp, &pi, 1e-12).unwrap();
    let exact = linear_values(&g.mdp, &pi);
    for (a, b) in v.iter().zip(&exact) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    // discounted random MDPs too
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mdp = random_mdp(5, 3, 0.8, &mut rng);
        let probs: Vec<f64> = (0..5)
            .flat_map(|_| {
                let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                let t: f64 = w.iter().sum();
                let mut w: Vec<f64> = w.iter().map(|x| x / t).collect();
                w[2] = 1.0 - w[0] - w[1];
                w
            })
            .collect();
        let pi = TabularPolicy::from_probs(5, 3, probs).unwrap();
        let v = policy_evaluation(&mdp, &pi, 1e-13).unwrap();
        let exact = linear_values(&mdp, &pi);
        for (a, b) in v.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn greedy_ties_and_direction() {
    let mdp = FiniteMdp::new(1, 3, 0.9, vec![det(1, 2.0), det(1, 2.0), det(1, 2.0)], None).unwrap();
    assert_eq!(greedy_improvement(&mdp, &[0.0]).greedy_actions(), vec![0]);

    let g = sutton_grid();
    let dist = bfs_steps(4, 4, &[(0, 0), (3, 3)]);
    let v: Vec<f64> = g.cells.iter().map(|&(r, c)| -(dist[r][c] as f64)).collect();
    let pi = greedy_improvement(&g.mdp, &v);
    for (s, &(r, c)) in g.cells.iter().enumerate() {
        let a = pi.greedy_actions()[s];
        let (nr, nc) = match a {
            0 => (r - 1, c),
            1 => (r, c + 1),
            2 => (r + 1, c),
            _ => (r, c - 1),
        };
        assert_eq!(dist[nr][nc] + 1, dist[r][c], "state ({r},{c}) action {a}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn improvement_is_monotone(seed in any::<u64>(), n in 1usize..=6, na in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(n, na, 0.9, &mut rng);
        let pi = TabularPolicy::uniform(n, na);
        let v = linear_values(&mdp, &pi);
        let improved = greedy_improvement(&mdp, &v);
        let v2 = linear_values(&mdp, &improved);
        for s in 0..n {
            prop_assert!(v2[s] >= v[s] - 1e-9);
        }
    }

    #[test]
    fn pi_vi_agree(seed in any::<u64>(), n in 1usize..=6, na in 1usize..=3, gamma in 0.0f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(n, na, gamma, &mut rng);
        let tol = 1e-8;
        let (pi, v) = policy_iteration(&mdp, tol).unwrap();
        let (v2, pi2) = value_iteration(&mdp, tol).unwrap();
        for s in 0..n {
            prop_assert!((v[s] - v2[s]).abs() <= 2.0 * tol);
        }
        prop_assert_eq!(pi, pi2);
    }
}

#[test]
fn policy_iteration_trivial_and_gridworld() {
    let mdp = FiniteMdp::new(2, 1, 1.0, vec![det(1, 0.0), det(2, 3.0)], None).unwrap();
    let (pi, v) = policy_iteration(&mdp, 1e-10).unwrap();
    assert_eq!(pi, TabularPolicy::uniform(2, 1));
    assert_eq!(v, vec![3.0, 3.0]);

    let g = sutton_grid();
    let dist = bfs_steps(4, 4, &[(0, 0), (3, 3)]);
    let (_, v) = policy_iteration(&g.mdp, 1e-10).unwrap();
    for (s, &(r, c)) in g.cells.iter().enumerate() {
        assert!((v[s] + dist[r][c] as f64).abs() < 1e-9);
    }
}

#[test]
fn value_iteration_examples() {
    let mdp = FiniteMdp::new(2, 1, 0.9, vec![det(1, 0.0), det(2, 10.0)], None).unwrap();
    let (v, _) = value_iteration(&mdp, 1e-12).unwrap();
    assert!((v[0] - 9.0).abs() < 1e-9 && (v[1] - 10.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mdp = random_mdp(4, 3, 0.0, &mut rng);
    let (v, _) = value_iteration(&mdp, 1e-12).unwrap();
    for s in 0..4 {
        let best = (0..3)
            .map(|a| {
                mdp.outcomes(s, a)
                    .iter()
                    .map(|o| o.prob * o.reward)
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((v[s] - best).abs() < 1e-12);
    }
}

#[test]
fn epsilon_greedy_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let q = [0.1, 0.7, 0.3, -0.2];
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[epsilon_greedy(&q, 1.0, &mut rng)] += 1;
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01);
    }
    let greedy = (0..draws)
        .filter(|_| epsilon_greedy(&q, 0.2, &mut rng) == 1)
        .count();
    let expected = 1.0 - 0.2 + 0.2 / 4.0;
    assert!((greedy as f64 / draws as f64 - expected).abs() < 0.01);
}

fn one_shot() -> FiniteMdp {
    FiniteMdp::new(1, 1, 0.0, vec![det(1, 5.0)], None).unwrap()
}

#[test]
fn td_one_step_overwrite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sarsa0(&one_shot(), 1, 1.0, 0.0, &mut rng).get(0, 0), 5.0);
    assert_eq!(
        q_learning(&one_shot(), 1, 1.0, 0.0, &mut rng).get(0, 0),
        5.0
    );
}

#[test]
fn td_is_reproducible() {
    let g = sutton_grid();
    let run = |f: fn(&FiniteMdp, usize, f64, f64, &mut ChaCha8Rng) -> QTable| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        f(&g.mdp, 300, 0.1, 0.1, &mut rng)
    };
    let (a, b) = (run(sarsa0), run(sarsa0));
    assert!(a
        .raw()
        .iter()
        .zip(b.raw())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let (a, b) = (run(q_learning), run(q_learning));
    assert!(a
        .raw()
        .iter()
        .zip(b.raw())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn sarsa_greedy_policy_is_optimal() {
    let g = sutton_grid();
    let (vstar, _) = value_iteration(&g.mdp, 1e-12).unwrap();
    let optimal = optimal_action_sets(&g, &vstar);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let q = sarsa0(&g.mdp, 20_000, 0.1, 0.1, &mut rng);
    for (s, a) in q.greedy_actions().into_iter().enumerate() {
        assert!(
            optimal[s].contains(&a),
            "state {s}: {a} not in {:?}",
            optimal[s]
        );
    }
}

#[test]
fn q_learning_values_match_vstar() {
    let g = sutton_grid();
    let (vstar, _) = value_iteration(&g.mdp, 1e-12).unwrap();
    let optimal = optimal_action_sets(&g, &vstar);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = q_learning(&g.mdp, 50_000, 0.1, 0.1, &mut rng);
    for (s, v) in q.state_values().iter().enumerate() {
        assert!(
            (v - vstar[s]).abs() < 0.05,
            "state {s}: {v} vs {}",
            vstar[s]
        );
    }
    for (s, a) in q.greedy_actions().into_iter().enumerate() {
        assert!(optimal[s].contains(&a));
    }
    assert_eq!(q.terminal_row(), &[0.0; 4]);
}

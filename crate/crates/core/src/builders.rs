//! Built-in MDPs: the two regression toys, the off-policy bias
//! counterexample, a slippery gridworld, a chain, and seeded random
//! generators for property tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mdp::{FiniteMdp, PolicyTable};

/// Four-state branching toy: states 0 and 1 each feed state 2 with reward
/// 0, state 2 chooses between reward 1 (action 0) and reward 0 (action 1),
/// state 3 is terminal. Starts at state 0 with probability 0.9.
pub fn fig3() -> FiniteMdp {
    let s = 4;
    let a = 2;
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    // States 0 and 1 have a single real choice; both action slots are
    // identical and the canonical policy takes action 0.
    for state in [0usize, 1] {
        for action in 0..a {
            t[idx(s, a, state, action, 2)] = 1.0;
        }
    }
    t[idx(s, a, 2, 0, 3)] = 1.0;
    t[idx(s, a, 2, 1, 3)] = 1.0;
    r[2 * a] = 1.0; // reward 1 for action 0 at state 2
    for action in 0..a {
        t[idx(s, a, 3, action, 3)] = 1.0;
    }
    FiniteMdp::new(s, a, t, r, 1.0, vec![0.9, 0.1, 0.0, 0.0], vec![false, false, false, true]).unwrap()
}

/// Canonical sampling policy for [`fig3`]: uniform at the branching state,
/// action 0 everywhere else.
pub fn fig3_uniform() -> PolicyTable {
    PolicyTable::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.5, 1.0, 0.0]).unwrap()
}

/// Stochastic extension of [`fig3`]: after the branching state the agent
/// passes through state 3, which transitions to state 4 (value 1) or
/// state 5 (value 0) with equal probability; state 6 is terminal.
pub fn fig4() -> FiniteMdp {
    let s = 7;
    let a = 2;
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    for state in [0usize, 1] {
        for action in 0..a {
            t[idx(s, a, state, action, 2)] = 1.0;
        }
    }
    t[idx(s, a, 2, 0, 3)] = 1.0;
    t[idx(s, a, 2, 1, 3)] = 1.0;
    r[2 * a] = 1.0;
    for action in 0..a {
        t[idx(s, a, 3, action, 4)] = 0.5;
        t[idx(s, a, 3, action, 5)] = 0.5;
        t[idx(s, a, 4, action, 6)] = 1.0;
        r[4 * a + action] = 1.0;
        t[idx(s, a, 5, action, 6)] = 1.0;
        t[idx(s, a, 6, action, 6)] = 1.0;
    }
    FiniteMdp::new(
        s,
        a,
        t,
        r,
        1.0,
        vec![0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![false, false, false, false, false, false, true],
    )
    .unwrap()
}

/// Canonical sampling policy for [`fig4`].
pub fn fig4_uniform() -> PolicyTable {
    let mut probs = vec![0.0; 7 * 2];
    for s in 0..7 {
        probs[s * 2] = 1.0;
    }
    probs[2 * 2] = 0.5;
    probs[2 * 2 + 1] = 0.5;
    PolicyTable::new(7, 2, probs).unwrap()
}

/// Two-state MDP where uncorrected advantage fitting is biased off-policy:
/// state 0 moves to state 1 or straight to the terminal state with equal
/// probability; state 1 pays 1 for action 0 and 0 for action 1.
pub fn counterexample() -> FiniteMdp {
    let s = 3;
    let a = 2;
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    for action in 0..a {
        t[idx(s, a, 0, action, 1)] = 0.5;
        t[idx(s, a, 0, action, 2)] = 0.5;
        t[idx(s, a, 2, action, 2)] = 1.0;
    }
    t[idx(s, a, 1, 0, 2)] = 1.0;
    t[idx(s, a, 1, 1, 2)] = 1.0;
    r[a] = 1.0; // action 0 at state 1
    FiniteMdp::new(s, a, t, r, 1.0, vec![1.0, 0.0, 0.0], vec![false, false, true]).unwrap()
}

/// Policy for [`counterexample`] taking action 0 at state 1 with
/// probability `p_up`.
pub fn counterexample_policy(p_up: f64) -> Result<PolicyTable> {
    PolicyTable::new(3, 2, vec![1.0, 0.0, p_up, 1.0 - p_up, 1.0, 0.0])
}

/// Slippery cliff gridworld: `width * height` cells, four movement
/// actions (up, down, left, right), reward -1 per step, discount 0.99.
/// With probability `slip_prob` a uniformly random action is executed
/// instead of the chosen one. The agent starts at the bottom-left cell
/// and must reach the terminal bottom-right cell; the bottom-row cells
/// between them are pits that cost -20 and teleport back to the start,
/// so slipping near the bottom row is expensive.
pub fn gridworld(width: usize, height: usize, slip_prob: f64) -> FiniteMdp {
    assert!(width * height >= 2, "gridworld needs at least two cells");
    assert!((0.0..=1.0).contains(&slip_prob));
    let s = width * height;
    let a = 4;
    let bottom = height - 1;
    let start = bottom * width;
    let goal = bottom * width + (width - 1);
    let is_pit = |cell: usize| -> bool {
        let (x, y) = (cell % width, cell / width);
        y == bottom && x >= 1 && x + 1 < width && height >= 2
    };
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    let step = |cell: usize, dir: usize| -> usize {
        let (x, y) = (cell % width, cell / width);
        let (nx, ny) = match dir {
            0 => (x, y.saturating_sub(1)),              // up
            1 => (x, (y + 1).min(height - 1)),          // down
            2 => (x.saturating_sub(1), y),              // left
            _ => ((x + 1).min(width - 1), y),           // right
        };
        ny * width + nx
    };
    for cell in 0..s {
        if cell == goal {
            for action in 0..a {
                t[idx(s, a, cell, action, cell)] = 1.0;
            }
            continue;
        }
        if is_pit(cell) {
            for action in 0..a {
                t[idx(s, a, cell, action, start)] = 1.0;
                r[cell * a + action] = -20.0;
            }
            continue;
        }
        for action in 0..a {
            r[cell * a + action] = -1.0;
            for executed in 0..a {
                let prob = if executed == action { 1.0 - slip_prob + slip_prob / 4.0 } else { slip_prob / 4.0 };
                t[idx(s, a, cell, action, step(cell, executed))] += prob;
            }
        }
    }
    let mut init = vec![0.0; s];
    init[start] = 1.0;
    let terminal: Vec<bool> = (0..s).map(|c| c == goal).collect();
    FiniteMdp::new(s, a, t, r, 0.99, init, terminal).unwrap()
}

/// Chain of `len` states with actions left/right; the right end is
/// terminal and pays 1 on entry, discount 0.99.
pub fn chain(len: usize) -> FiniteMdp {
    assert!(len >= 2);
    let s = len;
    let a = 2;
    let goal = len - 1;
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    for state in 0..goal {
        t[idx(s, a, state, 0, state.saturating_sub(1))] = 1.0;
        t[idx(s, a, state, 1, state + 1)] = 1.0;
        if state + 1 == goal {
            r[state * a + 1] = 1.0;
        }
    }
    for action in 0..a {
        t[idx(s, a, goal, action, goal)] = 1.0;
    }
    let mut init = vec![0.0; s];
    init[0] = 1.0;
    let terminal: Vec<bool> = (0..s).map(|c| c == goal).collect();
    FiniteMdp::new(s, a, t, r, 0.99, init, terminal).unwrap()
}

/// Random episodic MDP: Dirichlet(1) transition rows mixed so the single
/// terminal state (the last index) is reached with probability at least
/// 0.1 per step, rewards uniform in [-1, 1], discount 1, uniform initial
/// distribution over non-terminal states.
pub fn random_mdp(seed: u64, num_states: usize, num_actions: usize) -> FiniteMdp {
    assert!(num_states >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = num_states;
    let a = num_actions;
    let term = s - 1;
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    for state in 0..s {
        for action in 0..a {
            if state == term {
                t[idx(s, a, state, action, state)] = 1.0;
                continue;
            }
            let row = dirichlet(&mut rng, s);
            for (s2, &d) in row.iter().enumerate() {
                let mut p = 0.9 * d;
                if s2 == term {
                    p += 0.1;
                }
                t[idx(s, a, state, action, s2)] = p;
            }
            r[state * a + action] = rng.random_range(-1.0..1.0);
        }
    }
    let init_p = 1.0 / (s - 1) as f64;
    let mut init = vec![init_p; s];
    init[term] = 0.0;
    let total: f64 = init.iter().sum();
    for p in init.iter_mut() {
        *p /= total;
    }
    let terminal: Vec<bool> = (0..s).map(|c| c == term).collect();
    FiniteMdp::new(s, a, t, r, 1.0, init, terminal).unwrap()
}

/// Random layered MDP with an exact finite horizon: transitions only move
/// to the next layer (full Dirichlet support there), the last layer feeds
/// the terminal state, rewards uniform in [-1, 1], discount 1. Useful when
/// the complete trajectory space must be enumerable.
pub fn layered_random_mdp(seed: u64, widths: &[usize], num_actions: usize) -> FiniteMdp {
    assert!(!widths.is_empty() && widths.iter().all(|&w| w > 0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: usize = widths.iter().sum::<usize>() + 1;
    let a = num_actions;
    let term = s - 1;
    let mut layer_start = Vec::with_capacity(widths.len());
    let mut acc = 0;
    for &w in widths {
        layer_start.push(acc);
        acc += w;
    }
    let mut t = vec![0.0; s * a * s];
    let mut r = vec![0.0; s * a];
    for (layer, &w) in widths.iter().enumerate() {
        let next: Vec<usize> = if layer + 1 < widths.len() {
            (layer_start[layer + 1]..layer_start[layer + 1] + widths[layer + 1]).collect()
        } else {
            vec![term]
        };
        for state in layer_start[layer]..layer_start[layer] + w {
            for action in 0..a {
                let row = dirichlet(&mut rng, next.len());
                for (k, &s2) in next.iter().enumerate() {
                    t[idx(s, a, state, action, s2)] = row[k];
                }
                r[state * a + action] = rng.random_range(-1.0..1.0);
            }
        }
    }
    for action in 0..a {
        t[idx(s, a, term, action, term)] = 1.0;
    }
    let mut init = vec![0.0; s];
    for state in 0..widths[0] {
        init[state] = 1.0 / widths[0] as f64;
    }
    let total: f64 = init.iter().sum();
    for p in init.iter_mut() {
        *p /= total;
    }
    let terminal: Vec<bool> = (0..s).map(|c| c == term).collect();
    FiniteMdp::new(s, a, t, r, 1.0, init, terminal).unwrap()
}

/// Random full-support policy with Dirichlet(1) rows.
pub fn random_policy(seed: u64, mdp: &FiniteMdp) -> PolicyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(mdp.num_states() * mdp.num_actions());
    for _ in 0..mdp.num_states() {
        probs.extend(dirichlet(&mut rng, mdp.num_actions()));
    }
    PolicyTable::new(mdp.num_states(), mdp.num_actions(), probs).unwrap()
}

/// Uniform policy matching the MDP's shape.
pub fn uniform_policy(mdp: &FiniteMdp) -> PolicyTable {
    PolicyTable::uniform(mdp.num_states(), mdp.num_actions())
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // Dirichlet(1) via normalized unit exponentials.
    let mut row: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>();
            -(1.0 - u).ln()
        })
        .collect();
    let sum: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= sum;
    }
    row
}

#[inline]
fn idx(s: usize, a: usize, state: usize, action: usize, next: usize) -> usize {
    (state * a + action) * s + next
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig3_shape() {
        let mdp = fig3();
        assert_eq!(mdp.num_states(), 4);
        assert!(mdp.is_terminal(3));
        assert_eq!(mdp.p(0, 0, 2), 1.0);
        assert_eq!(mdp.reward(2, 0), 1.0);
        assert_eq!(mdp.reward(2, 1), 0.0);
        assert_eq!(mdp.initial_dist()[0], 0.9);
        assert!(mdp.is_deterministic());
    }

    #[test]
    fn fig4_shape() {
        let mdp = fig4();
        assert_eq!(mdp.num_states(), 7);
        assert_eq!(mdp.p(3, 0, 4), 0.5);
        assert_eq!(mdp.p(3, 1, 5), 0.5);
        assert_eq!(mdp.reward(4, 0), 1.0);
        assert!(!mdp.is_deterministic());
    }

    #[test]
    fn counterexample_shape() {
        let mdp = counterexample();
        assert_eq!(mdp.p(0, 0, 1), 0.5);
        assert_eq!(mdp.p(0, 0, 2), 0.5);
        assert_eq!(mdp.reward(1, 0), 1.0);
        assert!(counterexample_policy(1.5).is_err());
    }

    #[test]
    fn gridworld_rows_normalize() {
        let mdp = gridworld(5, 5, 0.2);
        assert_eq!(mdp.num_states(), 25);
        for s in 0..25 {
            for a in 0..4 {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert!(mdp.is_terminal(24));
        assert!(!gridworld(5, 5, 0.2).is_deterministic());
        assert!(gridworld(5, 5, 0.0).is_deterministic());
    }

    #[test]
    fn gridworld_cliff_layout() {
        let mdp = gridworld(5, 5, 0.2);
        // Start bottom-left, goal bottom-right, pits between them.
        assert_eq!(mdp.initial_dist()[20], 1.0);
        assert!(mdp.is_terminal(24));
        for pit in [21, 22, 23] {
            for a in 0..4 {
                assert_eq!(mdp.p(pit, a, 20), 1.0);
                assert_eq!(mdp.reward(pit, a), -20.0);
            }
        }
        // Ordinary cells pay the step cost.
        assert_eq!(mdp.reward(0, 3), -1.0);
    }

    #[test]
    fn chain_goal_reward() {
        let mdp = chain(5);
        assert_eq!(mdp.reward(3, 1), 1.0);
        assert_eq!(mdp.reward(3, 0), 0.0);
        assert_eq!(mdp.p(0, 0, 0), 1.0);
        assert!(mdp.is_terminal(4));
    }

    #[test]
    fn random_mdp_is_reproducible_and_episodic() {
        let a = random_mdp(7, 6, 3);
        let b = random_mdp(7, 6, 3);
        assert_eq!(a, b);
        let term = a.num_states() - 1;
        for s in 0..term {
            for act in 0..3 {
                assert!(a.p(s, act, term) >= 0.1);
            }
        }
    }

    #[test]
    fn layered_mdp_has_exact_horizon() {
        let mdp = layered_random_mdp(3, &[2, 2, 1], 2);
        assert_eq!(mdp.num_states(), 6);
        // Layer 0 states only reach layer 1.
        for s in 0..2 {
            for a in 0..2 {
                for (s2, _) in mdp.successors(s, a) {
                    assert!((2..4).contains(&s2));
                }
            }
        }
        // Final layer goes straight to the terminal state.
        for a in 0..2 {
            assert_eq!(mdp.p(4, a, 5), 1.0);
        }
    }
}

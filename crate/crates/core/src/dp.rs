//! Exact dynamic-programming oracles: state values, Q, advantages, and
//! nature's advantage, all from direct linear solves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, PolicyTable};

/// Sparse `(s, a, s')` table defined only on the transition support.
/// Reads off the support are errors, not zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NatureTable {
    entries: BTreeMap<(usize, usize, usize), f64>,
}

impl NatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero table over the MDP's transition support.
    pub fn zero_on_support(mdp: &FiniteMdp) -> Self {
        let mut entries = BTreeMap::new();
        for (s, a, s2) in mdp.support_transitions() {
            entries.insert((s, a, s2), 0.0);
        }
        Self { entries }
    }

    pub fn insert(&mut self, s: usize, a: usize, s2: usize, value: f64) {
        self.entries.insert((s, a, s2), value);
    }

    pub fn get(&self, s: usize, a: usize, s2: usize) -> Option<f64> {
        self.entries.get(&(s, a, s2)).copied()
    }

    /// Guarded read: off-support access is an error.
    pub fn get_checked(&self, s: usize, a: usize, s2: usize) -> Result<f64> {
        self.get(s, a, s2).ok_or(Error::OffSupport { state: s, action: a, next: s2 })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize, usize), &f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Solves the Bellman system `(I - gamma * P_pi) V = r_pi` restricted to
/// non-terminal states; terminal states have value zero.
pub fn policy_evaluation_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    let states: Vec<usize> = (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let index: BTreeMap<usize, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = states.len();
    if n == 0 {
        return Ok(vec![0.0; mdp.num_states()]);
    }
    let gamma = mdp.discount();
    let mut system = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, &s) in states.iter().enumerate() {
        system[(i, i)] = 1.0;
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            rhs[i] += pa * mdp.reward(s, a);
            for (s2, p) in mdp.successors(s, a) {
                if let Some(&j) = index.get(&s2) {
                    system[(i, j)] -= gamma * pa * p;
                }
            }
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("policy evaluation Bellman system".into()))?;
    let mut values = vec![0.0; mdp.num_states()];
    for (i, &s) in states.iter().enumerate() {
        values[s] = solution[i];
    }
    Ok(values)
}

/// `Q(s,a) = r(s,a) + gamma * sum_s' p(s'|s,a) V(s')` from the exact V.
pub fn q_values_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    let values = policy_evaluation_exact(mdp, policy)?;
    Ok(q_from_values(mdp, &values))
}

/// Q-table induced by an arbitrary state-value table.
pub fn q_from_values(mdp: &FiniteMdp, values: &[f64]) -> DMatrix<f64> {
    let gamma = mdp.discount();
    DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| {
        if mdp.is_terminal(s) {
            0.0
        } else {
            mdp.reward(s, a) + gamma * mdp.successors(s, a).map(|(s2, p)| p * values[s2]).sum::<f64>()
        }
    })
}

/// Advantage table `A(s,a) = Q(s,a) - V(s)`.
pub fn advantage_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    let values = policy_evaluation_exact(mdp, policy)?;
    let q = q_from_values(mdp, &values);
    Ok(DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| q[(s, a)] - values[s]))
}

/// Nature's advantage `B(s,a,s') = V(s') - E[V(s')|s,a]` on the
/// transition support.
pub fn nature_advantage_exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<NatureTable> {
    let values = policy_evaluation_exact(mdp, policy)?;
    Ok(nature_from_values(mdp, &values))
}

/// Nature's advantage induced by an arbitrary state-value table.
pub fn nature_from_values(mdp: &FiniteMdp, values: &[f64]) -> NatureTable {
    let mut table = NatureTable::new();
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let support: Vec<(usize, f64)> = mdp.successors(s, a).collect();
            if support.len() == 1 {
                // One-hot row: the deviation from the mean is exactly zero.
                table.insert(s, a, support[0].0, 0.0);
                continue;
            }
            let mean: f64 = support.iter().map(|&(s2, p)| p * values[s2]).sum();
            for &(s2, _) in &support {
                table.insert(s, a, s2, values[s2] - mean);
            }
        }
    }
    table
}

/// Expected undiscounted visit counts per state under the policy:
/// `(I - P_pi^T) rho = initial_dist` over non-terminal states.
pub fn expected_visits(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    let states: Vec<usize> = (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let index: BTreeMap<usize, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = states.len();
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, &s) in states.iter().enumerate() {
        rhs[i] = mdp.initial_dist()[s];
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (s2, p) in mdp.successors(s, a) {
                if let Some(&j) = index.get(&s2) {
                    system[(j, i)] -= pa * p;
                }
            }
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("expected-visit system".into()))?;
    let mut rho = vec![0.0; mdp.num_states()];
    for (i, &s) in states.iter().enumerate() {
        rho[s] = solution[i];
    }
    Ok(rho)
}

/// Exact policy iteration. Returns the optimal deterministic policy (ties
/// broken by the lowest action index) and its value table.
pub fn policy_iteration(mdp: &FiniteMdp) -> Result<(PolicyTable, Vec<f64>)> {
    let mut actions = vec![0usize; mdp.num_states()];
    loop {
        let policy = PolicyTable::deterministic(mdp.num_actions(), &actions)?;
        let values = policy_evaluation_exact(mdp, &policy)?;
        let q = q_from_values(mdp, &values);
        let mut changed = false;
        for s in 0..mdp.num_states() {
            let mut best = 0;
            for a in 1..mdp.num_actions() {
                if q[(s, a)] > q[(s, best)] + 1e-12 {
                    best = a;
                }
            }
            if best != actions[s] {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((policy, values));
        }
    }
}

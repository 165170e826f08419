//! Transition models used to center nature's advantage: either the true
//! MDP probabilities (oracle) or empirical counts from data.

use std::collections::BTreeMap;

use crate::mdp::FiniteMdp;
use crate::trajectory::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Oracle,
    Empirical,
}

/// Sparse `p(s'|s,a)` over an explicit support. Empirical models also
/// carry the visit counts they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    kind: ModelKind,
    probs: BTreeMap<(usize, usize), Vec<(usize, f64)>>,
    sa_counts: BTreeMap<(usize, usize), u64>,
    sas_counts: BTreeMap<(usize, usize, usize), u64>,
}

impl TransitionModel {
    /// Oracle model: the MDP's own transition rows.
    pub fn oracle(mdp: &FiniteMdp) -> Self {
        let mut probs = BTreeMap::new();
        for s in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                probs.insert((s, a), mdp.successors(s, a).collect());
            }
        }
        Self {
            kind: ModelKind::Oracle,
            probs,
            sa_counts: BTreeMap::new(),
            sas_counts: BTreeMap::new(),
        }
    }

    /// Empirical model from raw transition counts, without smoothing.
    pub fn from_counts(sas_counts: BTreeMap<(usize, usize, usize), u64>) -> Self {
        let mut sa_counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (&(s, a, _), &c) in &sas_counts {
            *sa_counts.entry((s, a)).or_insert(0) += c;
        }
        let mut probs: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for (&(s, a, s2), &c) in &sas_counts {
            if c == 0 {
                continue;
            }
            let total = sa_counts[&(s, a)] as f64;
            probs.entry((s, a)).or_default().push((s2, c as f64 / total));
        }
        Self {
            kind: ModelKind::Empirical,
            probs,
            sa_counts,
            sas_counts,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Support row for `(s, a)`, if observed.
    pub fn row(&self, s: usize, a: usize) -> Option<&[(usize, f64)]> {
        self.probs.get(&(s, a)).map(|v| v.as_slice())
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> Option<f64> {
        self.row(s, a)?.iter().find(|&&(k, _)| k == s2).map(|&(_, p)| p)
    }

    pub fn supports(&self, s: usize, a: usize, s2: usize) -> bool {
        self.prob(s, a, s2).map(|p| p > 0.0).unwrap_or(false)
    }

    pub fn count(&self, s: usize, a: usize, s2: usize) -> u64 {
        self.sas_counts.get(&(s, a, s2)).copied().unwrap_or(0)
    }

    pub fn count_sa(&self, s: usize, a: usize) -> u64 {
        self.sa_counts.get(&(s, a)).copied().unwrap_or(0)
    }
}

/// Counts every transition in the dataset (including the final step into
/// each trajectory's end state) and normalizes per `(s, a)`.
pub fn estimate_transitions(data: &Dataset) -> TransitionModel {
    let mut counts: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    for traj in &data.trajectories {
        for (t, step) in traj.steps.iter().enumerate() {
            *counts.entry((step.state, step.action, traj.next_state(t))).or_insert(0) += 1;
        }
    }
    TransitionModel::from_counts(counts)
}

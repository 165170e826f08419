//! Verifiers for the identities behind the estimator family: the return
//! decomposition, the population-level minimizer recovery, the policy
//! improvement lemma, the corrected-target hierarchy, and the closed-form
//! off-policy bias of the two-state counterexample.

use nalgebra::DMatrix;

use crate::dp::{
    advantage_exact, nature_advantage_exact, policy_evaluation_exact, NatureTable,
};
use crate::error::{Error, Result};
use crate::fit::{
    fit_offpolicy_dae_windows, population_windows, DecompositionTables,
};
use crate::mdp::{FiniteMdp, PolicyTable};
use crate::targets::{critic_target_hierarchy, HierarchyMethod};
use crate::trajectory::{BackupLength, Dataset, Trajectory};
use crate::transition_model::TransitionModel;

/// `G - V(s_0) - sum_t gamma^t (A_t + gamma B_t)` for one trajectory.
/// Zero (up to rounding) whenever the tables are exact.
pub fn decomposition_residual(
    traj: &Trajectory,
    values: &[f64],
    advantage: &DMatrix<f64>,
    nature: &NatureTable,
    gamma: f64,
) -> Result<f64> {
    let mut residual = traj.discounted_return(gamma);
    if let Some(first) = traj.steps.first() {
        residual -= values[first.state];
    }
    let mut scale = 1.0;
    for (t, step) in traj.steps.iter().enumerate() {
        let b = nature.get_checked(step.state, step.action, traj.next_state(t))?;
        residual -= scale * (advantage[(step.state, step.action)] + gamma * b);
        scale *= gamma;
    }
    Ok(residual)
}

/// Closed-form minimizer of the uncorrected advantage fit on the
/// two-state counterexample, together with the true target value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormBias {
    pub v_star: f64,
    pub lambda: f64,
    pub a_star_u: f64,
    pub a_star_d: f64,
    pub v_pi: f64,
    pub bias: f64,
}

/// Evaluates the counterexample's closed form for behavior probability
/// `mu_u` and target probability `pi_u` of the rewarding action.
pub fn counterexample_closed_form(mu_u: f64, pi_u: f64) -> Result<ClosedFormBias> {
    if !(mu_u > 0.0 && mu_u < 1.0) {
        return Err(Error::Domain(format!(
            "behavior probability mu_u = {mu_u} must lie strictly inside (0, 1)"
        )));
    }
    if !(0.0..=1.0).contains(&pi_u) {
        return Err(Error::Domain(format!("target probability pi_u = {pi_u} outside [0, 1]")));
    }
    let mu_d = 1.0 - mu_u;
    let pi_d = 1.0 - pi_u;
    let v_star = pi_u / (1.0 + pi_u * pi_u / mu_u + pi_d * pi_d / mu_d);
    let a_star_u = 1.0 - v_star - v_star * pi_u / mu_u;
    let a_star_d = -v_star - v_star * pi_d / mu_d;
    let v_pi = pi_u / 2.0;
    Ok(ClosedFormBias {
        v_star,
        lambda: v_star,
        a_star_u,
        a_star_d,
        v_pi,
        bias: v_star - v_pi,
    })
}

/// Outcome of one population-level minimizer check.
#[derive(Debug, Clone)]
pub struct Theorem1Report {
    pub max_error_v: f64,
    pub max_error_a: f64,
    pub max_error_b: f64,
    /// Full design rank and explorative coverage: the minimizer is unique.
    pub unique: bool,
    /// Support transitions the behavior policy can never reach; empty for
    /// explorative behavior.
    pub unreached: Vec<(usize, usize, usize)>,
    /// All errors below `tol` and the minimizer unique.
    pub passed: bool,
}

/// Builds the population off-policy fit (exhaustive window enumeration
/// under the behavior policy, oracle transition model) and reports the
/// maximum deviation of the fitted tables from the dynamic-programming
/// oracles of the target policy.
///
/// With a finite backup length every reachable state receives a value
/// estimate; with an episode-length backup only initial states do, and
/// the transition graph must be acyclic.
///
/// A non-explorative behavior policy is reported (`unreached` non-empty,
/// `unique = false`), not treated as an error.
pub fn verify_theorem1(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    target: &PolicyTable,
    backup: BackupLength,
    tol: f64,
) -> Result<Theorem1Report> {
    behavior.check_shape(mdp)?;
    target.check_shape(mdp)?;
    let unreached = unreached_transitions(mdp, behavior, target);

    let windows = population_windows(mdp, behavior, backup)?;
    let model = TransitionModel::oracle(mdp);
    let report = fit_offpolicy_dae_windows(&windows, target, &model, mdp.discount(), None)?;

    let exact_v = policy_evaluation_exact(mdp, target)?;
    let exact_a = advantage_exact(mdp, target)?;
    let exact_b = nature_advantage_exact(mdp, target)?;
    let mut max_error_v = 0.0f64;
    for (s, v) in &report.tables.v {
        max_error_v = max_error_v.max((v - exact_v[*s]).abs());
    }
    let mut max_error_a = 0.0f64;
    for ((s, a), v) in &report.tables.a {
        max_error_a = max_error_a.max((v - exact_a[(*s, *a)]).abs());
    }
    let mut max_error_b = 0.0f64;
    for ((s, a, s2), v) in report.tables.b.iter() {
        max_error_b = max_error_b.max((v - exact_b.get(*s, *a, *s2).unwrap_or(0.0)).abs());
    }
    let unique = report.unique && unreached.is_empty();
    let passed = unique && max_error_v < tol && max_error_a < tol && max_error_b < tol;
    Ok(Theorem1Report {
        max_error_v,
        max_error_a,
        max_error_b,
        unique,
        unreached,
        passed,
    })
}

/// Support transitions the target policy can reach but the behavior
/// policy cannot: the behavior is sufficiently explorative exactly when
/// this is empty, i.e. its coverage includes the target's coverage.
pub fn unreached_transitions(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    target: &PolicyTable,
) -> Vec<(usize, usize, usize)> {
    let reached_mu = reachable_states(mdp, behavior);
    let reached_pi = reachable_states(mdp, target);
    mdp.support_transitions()
        .into_iter()
        .filter(|&(s, a, _)| reached_pi[s] && target.prob(s, a) > 0.0)
        .filter(|&(s, a, _)| !reached_mu[s] || behavior.prob(s, a) == 0.0)
        .collect()
}

fn reachable_states(mdp: &FiniteMdp, policy: &PolicyTable) -> Vec<bool> {
    let mut reached = vec![false; mdp.num_states()];
    let mut stack: Vec<usize> = (0..mdp.num_states())
        .filter(|&s| mdp.initial_dist()[s] > 0.0)
        .collect();
    for &s in &stack {
        reached[s] = true;
    }
    while let Some(s) = stack.pop() {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.num_actions() {
            if policy.prob(s, a) == 0.0 {
                continue;
            }
            for (s2, _) in mdp.successors(s, a) {
                if !reached[s2] {
                    reached[s2] = true;
                    stack.push(s2);
                }
            }
        }
    }
    reached
}

/// Maximum residual of the policy improvement identity
/// `V_mu(s) = V_pi(s) + E_mu[sum_t gamma^t A_pi(s_t, a_t) | s_0 = s]`,
/// with both sides computed exactly.
pub fn policy_improvement_check(mdp: &FiniteMdp, mu: &PolicyTable, pi: &PolicyTable) -> Result<f64> {
    let v_mu = policy_evaluation_exact(mdp, mu)?;
    let v_pi = policy_evaluation_exact(mdp, pi)?;
    let a_pi = advantage_exact(mdp, pi)?;

    // x = E_mu[sum_t gamma^t A_pi] solves the Bellman-style system on the
    // behavior chain with A_pi averaged under mu as the reward.
    let states: Vec<usize> = (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let index: std::collections::BTreeMap<usize, usize> =
        states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = states.len();
    let gamma = mdp.discount();
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    for (i, &s) in states.iter().enumerate() {
        for a in 0..mdp.num_actions() {
            let pa = mu.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            rhs[i] += pa * a_pi[(s, a)];
            for (s2, p) in mdp.successors(s, a) {
                if let Some(&j) = index.get(&s2) {
                    system[(i, j)] -= gamma * pa * p;
                }
            }
        }
    }
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("policy improvement expectation".into()))?;

    let mut worst = 0.0f64;
    for (i, &s) in states.iter().enumerate() {
        worst = worst.max((v_mu[s] - v_pi[s] - x[i]).abs());
    }
    Ok(worst)
}

/// Checks the two collapse identities of the corrected-target hierarchy
/// on every backup window of the dataset and returns the maximum
/// deviation (identically zero up to rounding).
pub fn hierarchy_check(
    tables: &DecompositionTables,
    data: &Dataset,
    bootstrap: Option<&[f64]>,
    gamma: f64,
    backup: BackupLength,
) -> Result<f64> {
    let mut zero_a = tables.clone();
    zero_a.a.values_mut().for_each(|v| *v = 0.0);
    let mut zero_b = tables.clone();
    zero_b.b = NatureTable::new();

    let mut worst = 0.0f64;
    for traj in &data.trajectories {
        for w in traj.windows(backup) {
            let uncorrected =
                critic_target_hierarchy(&w, tables, bootstrap, gamma, HierarchyMethod::Uncorrected)?;
            let dae_zero_a = critic_target_hierarchy(&w, &zero_a, bootstrap, gamma, HierarchyMethod::Dae)?;
            worst = worst.max((uncorrected - dae_zero_a).abs());

            let dae = critic_target_hierarchy(&w, tables, bootstrap, gamma, HierarchyMethod::Dae)?;
            let off_zero_b =
                critic_target_hierarchy(&w, &zero_b, bootstrap, gamma, HierarchyMethod::OffpolicyDae)?;
            worst = worst.max((dae - off_zero_b).abs());
        }
    }
    Ok(worst)
}

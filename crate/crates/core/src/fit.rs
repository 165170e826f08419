//! Return-estimation fits posed as linear regressions over backup
//! windows: Monte-Carlo and batch TD(0) value estimates, plus the direct
//! advantage estimator family with policy- and transition-centered
//! parametrizations solved by minimum-norm pseudoinverse.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::dp::{expected_visits, NatureTable};
use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, PolicyTable};
use crate::trajectory::{BackupLength, Dataset, Step, Window};
use crate::transition_model::TransitionModel;

/// An owned backup window with a probability (or multiplicity) weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedWindow {
    pub steps: Vec<Step>,
    pub end_state: usize,
    pub end_terminal: bool,
    pub weight: f64,
}

impl WeightedWindow {
    pub fn window(&self) -> Window<'_> {
        Window {
            steps: &self.steps,
            end_state: self.end_state,
            end_terminal: self.end_terminal,
        }
    }
}

/// Fitted `(V, A, B)` tables. Only quantities observed in the fitting
/// data carry entries; everything else is absent rather than zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecompositionTables {
    pub v: BTreeMap<usize, f64>,
    pub a: BTreeMap<(usize, usize), f64>,
    pub b: NatureTable,
}

impl DecompositionTables {
    /// Exact tables from the dynamic-programming oracles.
    pub fn exact(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<Self> {
        let values = crate::dp::policy_evaluation_exact(mdp, policy)?;
        let adv = crate::dp::advantage_exact(mdp, policy)?;
        let mut v = BTreeMap::new();
        let mut a = BTreeMap::new();
        for s in 0..mdp.num_states() {
            v.insert(s, values[s]);
            for act in 0..mdp.num_actions() {
                a.insert((s, act), adv[(s, act)]);
            }
        }
        Ok(Self {
            v,
            a,
            b: crate::dp::nature_advantage_exact(mdp, policy)?,
        })
    }

    pub fn v_of(&self, s: usize) -> Option<f64> {
        self.v.get(&s).copied()
    }

    pub fn a_or_zero(&self, s: usize, a: usize) -> f64 {
        self.a.get(&(s, a)).copied().unwrap_or(0.0)
    }

    pub fn b_or_zero(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.b.get(s, a, s2).unwrap_or(0.0)
    }

    /// CSV export with one `entity,index,value` row per table entry.
    /// Indices are colon-joined.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("entity,index,value\n");
        for (s, v) in &self.v {
            writeln!(out, "V,{s},{v:.16e}").unwrap();
        }
        for ((s, a), v) in &self.a {
            writeln!(out, "A,{s}:{a},{v:.16e}").unwrap();
        }
        for ((s, a, s2), v) in self.b.iter() {
            writeln!(out, "B,{s}:{a}:{s2},{v:.16e}").unwrap();
        }
        out
    }
}

/// Result of a constrained least-squares fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub tables: DecompositionTables,
    pub objective_value: f64,
    pub design_rank: usize,
    /// True when the design rank equals the number of identifiable
    /// parameters, i.e. the constrained minimizer is unique.
    pub unique: bool,
}

/// Monte-Carlo value estimate: mean return per start state. States never
/// started from are absent.
pub fn fit_mc(data: &Dataset, gamma: f64) -> Result<BTreeMap<usize, f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
    for traj in &data.trajectories {
        let Some(first) = traj.steps.first() else { continue };
        let entry = sums.entry(first.state).or_insert((0.0, 0));
        entry.0 += traj.discounted_return(gamma);
        entry.1 += 1;
    }
    Ok(sums.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect())
}

/// Batch TD(0) fixed point: exact policy evaluation on the empirical MDP
/// built from dataset counts. Fails when the empirical model references a
/// state whose value is undetermined or is not episodic.
pub fn fit_batch_td0(data: &Dataset, gamma: f64) -> Result<BTreeMap<usize, f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut visit_counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut reward_sums: BTreeMap<usize, f64> = BTreeMap::new();
    let mut edge_counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut terminals: BTreeSet<usize> = BTreeSet::new();
    for traj in &data.trajectories {
        for (t, step) in traj.steps.iter().enumerate() {
            *visit_counts.entry(step.state).or_insert(0) += 1;
            *reward_sums.entry(step.state).or_insert(0.0) += step.reward;
            *edge_counts.entry((step.state, traj.next_state(t))).or_insert(0) += 1;
        }
        if !traj.truncated {
            terminals.insert(traj.final_state);
        }
    }
    let sources: Vec<usize> = visit_counts.keys().copied().collect();
    let index: BTreeMap<usize, usize> = sources.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    for &(_, s2) in edge_counts.keys() {
        if !index.contains_key(&s2) && !terminals.contains(&s2) {
            return Err(Error::NonEpisodic(format!(
                "empirical model reaches state {s2}, which is never left and never terminal"
            )));
        }
    }
    let n = sources.len();
    let mut system = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, &s) in sources.iter().enumerate() {
        system[(i, i)] = visit_counts[&s] as f64;
        rhs[i] = reward_sums[&s];
    }
    for (&(s, s2), &c) in &edge_counts {
        if let Some(&j) = index.get(&s2) {
            system[(index[&s], j)] -= gamma * c as f64;
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonEpisodic("empirical batch TD(0) system is singular".into()))?;
    Ok(sources.iter().enumerate().map(|(i, &s)| (s, solution[i])).collect())
}

/// Expands a dataset into unit-weight backup windows.
pub fn dataset_windows(data: &Dataset, backup: BackupLength) -> Vec<WeightedWindow> {
    let mut out = Vec::new();
    for traj in &data.trajectories {
        if traj.is_empty() {
            continue;
        }
        for w in traj.windows(backup) {
            out.push(WeightedWindow {
                steps: w.steps.to_vec(),
                end_state: w.end_state,
                end_terminal: w.end_terminal,
                weight: 1.0,
            });
        }
    }
    out
}

/// Exhaustive probability-weighted window enumeration under a behavior
/// policy. With a finite backup length every window of up to `n + 1`
/// steps is weighted by its expected number of occurrences; with an
/// episode-length backup, complete trajectories are enumerated, which
/// requires the behavior-reachable transition graph to be acyclic.
pub fn population_windows(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    backup: BackupLength,
) -> Result<Vec<WeightedWindow>> {
    behavior.check_shape(mdp)?;
    let mut out = Vec::new();
    match backup {
        BackupLength::Steps(n) => {
            let rho = expected_visits(mdp, behavior)?;
            for s in 0..mdp.num_states() {
                if mdp.is_terminal(s) || rho[s] <= 0.0 {
                    continue;
                }
                extend_window(mdp, behavior, s, n + 1, rho[s], &mut Vec::new(), &mut out);
            }
        }
        BackupLength::Episode => {
            if let Some(state) = behavior_cycle(mdp, behavior) {
                return Err(Error::Config(format!(
                    "episode-length population enumeration requires an acyclic transition graph, \
                     but state {state} can revisit itself under the behavior policy"
                )));
            }
            for s in 0..mdp.num_states() {
                let init = mdp.initial_dist()[s];
                if init <= 0.0 {
                    continue;
                }
                extend_window(mdp, behavior, s, usize::MAX, init, &mut Vec::new(), &mut out);
            }
        }
    }
    Ok(out)
}

fn extend_window(
    mdp: &FiniteMdp,
    behavior: &PolicyTable,
    state: usize,
    steps_left: usize,
    weight: f64,
    prefix: &mut Vec<Step>,
    out: &mut Vec<WeightedWindow>,
) {
    if mdp.is_terminal(state) || steps_left == 0 {
        if !prefix.is_empty() {
            out.push(WeightedWindow {
                steps: prefix.clone(),
                end_state: state,
                end_terminal: mdp.is_terminal(state),
                weight,
            });
        }
        return;
    }
    for a in 0..mdp.num_actions() {
        let pa = behavior.prob(state, a);
        if pa == 0.0 {
            continue;
        }
        for (s2, p) in mdp.successors(state, a) {
            prefix.push(Step { state, action: a, reward: mdp.reward(state, a) });
            extend_window(mdp, behavior, s2, steps_left - 1, weight * pa * p, prefix, out);
            prefix.pop();
        }
    }
}

/// Finds a state that can reach itself along behavior-positive edges.
fn behavior_cycle(mdp: &FiniteMdp, behavior: &PolicyTable) -> Option<usize> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    fn visit(mdp: &FiniteMdp, behavior: &PolicyTable, s: usize, colors: &mut Vec<Color>) -> Option<usize> {
        colors[s] = Color::Gray;
        if !mdp.is_terminal(s) {
            for a in 0..mdp.num_actions() {
                if behavior.prob(s, a) == 0.0 {
                    continue;
                }
                for (s2, _) in mdp.successors(s, a) {
                    match colors[s2] {
                        Color::Gray => return Some(s2),
                        Color::White => {
                            if let Some(hit) = visit(mdp, behavior, s2, colors) {
                                return Some(hit);
                            }
                        }
                        Color::Black => {}
                    }
                }
            }
        }
        colors[s] = Color::Black;
        None
    }
    let mut colors = vec![Color::White; mdp.num_states()];
    for s in 0..mdp.num_states() {
        if colors[s] == Color::White {
            if let Some(hit) = visit(mdp, behavior, s, &mut colors) {
                return Some(hit);
            }
        }
    }
    None
}

/// Direct advantage estimation: fits `(V, A)` by least squares over the
/// dataset's backup windows with the advantage centered under the target
/// policy. The returned `B` table is empty (identically zero).
pub fn fit_dae(
    data: &Dataset,
    target_policy: &PolicyTable,
    gamma: f64,
    backup: BackupLength,
    bootstrap: Option<&[f64]>,
) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if backup == BackupLength::Episode && bootstrap.is_none() && data.trajectories.iter().any(|t| t.truncated) {
        return Err(Error::TruncatedRequiresBootstrap);
    }
    fit_dae_windows(&dataset_windows(data, backup), target_policy, gamma, bootstrap)
}

/// [`fit_dae`] over explicit weighted windows (population mode).
pub fn fit_dae_windows(
    windows: &[WeightedWindow],
    target_policy: &PolicyTable,
    gamma: f64,
    bootstrap: Option<&[f64]>,
) -> Result<FitReport> {
    fit_windows(windows, target_policy, gamma, bootstrap, None)
}

/// Off-policy direct advantage estimation: fits `(V, A, B)` with the
/// advantage centered under the target policy and nature's advantage
/// centered under the transition model.
pub fn fit_offpolicy_dae(
    data: &Dataset,
    target_policy: &PolicyTable,
    model: &TransitionModel,
    gamma: f64,
    backup: BackupLength,
    bootstrap: Option<&[f64]>,
) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if backup == BackupLength::Episode && bootstrap.is_none() && data.trajectories.iter().any(|t| t.truncated) {
        return Err(Error::TruncatedRequiresBootstrap);
    }
    fit_offpolicy_dae_windows(&dataset_windows(data, backup), target_policy, model, gamma, bootstrap)
}

/// [`fit_offpolicy_dae`] over explicit weighted windows (population mode).
pub fn fit_offpolicy_dae_windows(
    windows: &[WeightedWindow],
    target_policy: &PolicyTable,
    model: &TransitionModel,
    gamma: f64,
    bootstrap: Option<&[f64]>,
) -> Result<FitReport> {
    fit_windows(windows, target_policy, gamma, bootstrap, Some(model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Col {
    V(usize),
    F(usize, usize),
    G(usize, usize, usize),
}

/// Relative singular-value cutoff for the pseudoinverse.
const SV_CUTOFF: f64 = 1e-10;
/// Probability mass considered complete when counting gauge directions.
const FULL_MASS: f64 = 1.0 - 1e-9;

fn fit_windows(
    windows: &[WeightedWindow],
    target_policy: &PolicyTable,
    gamma: f64,
    bootstrap: Option<&[f64]>,
    model: Option<&TransitionModel>,
) -> Result<FitReport> {
    let windows: Vec<&WeightedWindow> = windows.iter().filter(|w| w.weight > 0.0 && !w.steps.is_empty()).collect();
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
    }

    // Observed support.
    let mut observed_actions: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut observed_next: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut v_states: BTreeSet<usize> = BTreeSet::new();
    for w in &windows {
        v_states.insert(w.steps[0].state);
        if !w.end_terminal && bootstrap.is_none() {
            v_states.insert(w.end_state);
        }
        for (t, step) in w.steps.iter().enumerate() {
            if step.state >= target_policy.num_states() || step.action >= target_policy.num_actions() {
                return Err(Error::Config(format!(
                    "step ({},{}) is outside the target policy's {}x{} table",
                    step.state,
                    step.action,
                    target_policy.num_states(),
                    target_policy.num_actions()
                )));
            }
            observed_actions.entry(step.state).or_default().insert(step.action);
            if model.is_some() {
                observed_next.entry((step.state, step.action)).or_default().insert(w.window().next_state(t));
            }
        }
    }
    if let Some(model) = model {
        for (&(s, a), nexts) in &observed_next {
            for &s2 in nexts {
                if !model.supports(s, a, s2) {
                    return Err(Error::UnsupportedTransition { state: s, action: a, next: s2 });
                }
            }
        }
    }

    // Column layout: V for window boundary states, F for the advantage
    // parametrization, G for the nature-advantage parametrization.
    let mut cols: Vec<Col> = Vec::new();
    cols.extend(v_states.iter().map(|&s| Col::V(s)));
    for (&s, actions) in &observed_actions {
        cols.extend(actions.iter().map(|&a| Col::F(s, a)));
    }
    if model.is_some() {
        for (&(s, a), nexts) in &observed_next {
            cols.extend(nexts.iter().map(|&s2| Col::G(s, a, s2)));
        }
    }
    let col_index: BTreeMap<Col, usize> = cols.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    // Dense design matrix; rows are weighted by sqrt(weight).
    let nrows = windows.len();
    let ncols = cols.len();
    let mut design = DMatrix::<f64>::zeros(nrows, ncols);
    let mut rhs = DVector::<f64>::zeros(nrows);
    for (i, w) in windows.iter().enumerate() {
        let scale = w.weight.sqrt();
        design[(i, col_index[&Col::V(w.steps[0].state)])] += scale;
        let mut discount_t = 1.0;
        let mut target = 0.0;
        for (t, step) in w.steps.iter().enumerate() {
            target += discount_t * step.reward;
            design[(i, col_index[&Col::F(step.state, step.action)])] += discount_t * scale;
            for &a2 in &observed_actions[&step.state] {
                let pa = target_policy.prob(step.state, a2);
                if pa != 0.0 {
                    design[(i, col_index[&Col::F(step.state, a2)])] -= discount_t * pa * scale;
                }
            }
            if let Some(model) = model {
                let next = w.window().next_state(t);
                let coeff = discount_t * gamma;
                design[(i, col_index[&Col::G(step.state, step.action, next)])] += coeff * scale;
                for &s2 in &observed_next[&(step.state, step.action)] {
                    let p = model.prob(step.state, step.action, s2).unwrap();
                    design[(i, col_index[&Col::G(step.state, step.action, s2)])] -= coeff * p * scale;
                }
            }
            discount_t *= gamma;
        }
        if !w.end_terminal {
            match bootstrap {
                Some(values) => target += discount_t * values[w.end_state],
                None => design[(i, col_index[&Col::V(w.end_state)])] -= discount_t * scale,
            }
        }
        rhs[i] = target * scale;
    }

    let solution = min_norm_least_squares(design, rhs)?;

    // Identifiable dimension: each state (and each model row) whose
    // observed probability mass is complete contributes one centering
    // gauge direction.
    let mut identifiable = v_states.len();
    for (&s, actions) in &observed_actions {
        let mass: f64 = actions.iter().map(|&a| target_policy.prob(s, a)).sum();
        identifiable += actions.len() - usize::from(mass >= FULL_MASS);
    }
    if let Some(model) = model {
        for (&(s, a), nexts) in &observed_next {
            let mass: f64 = nexts.iter().map(|&s2| model.prob(s, a, s2).unwrap()).sum();
            identifiable += nexts.len() - usize::from(mass >= FULL_MASS);
        }
    }

    // Export centered tables.
    let mut tables = DecompositionTables::default();
    for &s in &v_states {
        tables.v.insert(s, solution.x[col_index[&Col::V(s)]]);
    }
    for (&s, actions) in &observed_actions {
        let mean: f64 = actions
            .iter()
            .map(|&a| target_policy.prob(s, a) * solution.x[col_index[&Col::F(s, a)]])
            .sum();
        for &a in actions {
            tables.a.insert((s, a), solution.x[col_index[&Col::F(s, a)]] - mean);
        }
    }
    if let Some(model) = model {
        for (&(s, a), nexts) in &observed_next {
            let mean: f64 = nexts
                .iter()
                .map(|&s2| model.prob(s, a, s2).unwrap() * solution.x[col_index[&Col::G(s, a, s2)]])
                .sum();
            for &s2 in nexts {
                tables.b.insert(s, a, s2, solution.x[col_index[&Col::G(s, a, s2)]] - mean);
            }
        }
    }

    Ok(FitReport {
        tables,
        objective_value: solution.objective,
        design_rank: solution.rank,
        unique: solution.rank == identifiable,
    })
}

struct LsqSolution {
    x: DVector<f64>,
    rank: usize,
    objective: f64,
}

/// Minimum-norm least squares by SVD pseudoinverse, with singular values
/// below `SV_CUTOFF * sigma_max` treated as zero. Tall systems are first
/// compressed by a QR factorization, which preserves singular values and
/// the minimizer.
fn min_norm_least_squares(design: DMatrix<f64>, rhs: DVector<f64>) -> Result<LsqSolution> {
    let (nrows, ncols) = design.shape();
    let (reduced, reduced_rhs, tail_sq) = if nrows > ncols {
        let qr = design.qr();
        let mut qtb = rhs;
        qr.q_tr_mul(&mut qtb);
        let tail_sq: f64 = (ncols..nrows).map(|i| qtb[i] * qtb[i]).sum();
        (qr.r(), DVector::from_fn(ncols, |i, _| qtb[i]), tail_sq)
    } else {
        (design, rhs, 0.0)
    };

    let residual_base = reduced.clone();
    let svd = reduced.svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let eps = SV_CUTOFF * sigma_max;
    let rank = svd.rank(eps);
    let x = if sigma_max == 0.0 {
        DVector::zeros(residual_base.ncols())
    } else {
        svd.solve(&reduced_rhs, eps)
            .map_err(|e| Error::SingularSystem(format!("pseudoinverse solve failed: {e}")))?
            .column(0)
            .into_owned()
    };
    let head = &residual_base * &x - &reduced_rhs;
    let objective = head.norm_squared() + tail_sq;
    Ok(LsqSolution { x, rank, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders;
    use crate::dp;
    use crate::trajectory::{sample_dataset, Trajectory};
    use approx::assert_abs_diff_eq;

    /// Constructed fig3 dataset with the given branch counts
    /// (start-0/up, start-0/down, start-1/up, start-1/down).
    fn fig3_count_dataset(n0u: usize, n0d: usize, n1u: usize, n1d: usize) -> Dataset {
        let mk = |start: usize, action: usize| Trajectory {
            steps: vec![
                Step { state: start, action: 0, reward: 0.0 },
                Step { state: 2, action, reward: if action == 0 { 1.0 } else { 0.0 } },
            ],
            final_state: 3,
            truncated: false,
        };
        let mut trajectories = Vec::new();
        trajectories.extend((0..n0u).map(|_| mk(0, 0)));
        trajectories.extend((0..n0d).map(|_| mk(0, 1)));
        trajectories.extend((0..n1u).map(|_| mk(1, 0)));
        trajectories.extend((0..n1d).map(|_| mk(1, 1)));
        Dataset::new(trajectories)
    }

    /// The closed-form fig3 regression system solved with the same
    /// pseudoinverse rule as the fitter, as an independent oracle.
    fn fig3_reference_solution(n0u: f64, n0d: f64, n1u: f64, n1d: f64) -> (f64, f64, f64) {
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[
                n0u - n0d,
                n0u + n0d,
                0.0,
                n1u - n1d,
                0.0,
                n1u + n1d,
                n0u + n1u,
                n0u,
                n1u,
            ],
        );
        let b = DVector::from_vec(vec![n0u, n1u, n0u + n1u]);
        let svd = m.svd(true, true);
        let sigma_max = svd.singular_values.iter().fold(0.0f64, |mx, &s| mx.max(s));
        let x = svd.solve(&b, SV_CUTOFF * sigma_max).unwrap();
        (x[0], x[1], x[2]) // (A(2, up), V(0), V(1))
    }

    #[test]
    fn mc_examples() {
        let data = fig3_count_dataset(3, 1, 2, 2);
        let v = fit_mc(&data, 1.0).unwrap();
        assert_abs_diff_eq!(v[&0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(v[&1], 0.5, epsilon = 1e-15);
        assert!(!v.contains_key(&2));

        let one = Dataset::new(vec![Trajectory {
            steps: vec![Step { state: 5, action: 0, reward: 7.0 }],
            final_state: 6,
            truncated: false,
        }]);
        assert_eq!(fit_mc(&one, 1.0).unwrap()[&5], 7.0);

        assert!(matches!(fit_mc(&Dataset::default(), 1.0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn mc_fig4_converges() {
        let mdp = builders::fig4();
        let data = sample_dataset(&mdp, &builders::fig4_uniform(), 99, 10_000, 20).unwrap();
        let v = fit_mc(&data, 1.0).unwrap();
        // Per-start returns have variance at most 0.5; three sigma over
        // ~9000 starts is well under 0.03.
        assert!((v[&0] - 1.0).abs() < 0.03, "V(0) = {}", v[&0]);
    }

    #[test]
    fn batch_td0_closed_form() {
        for (n0u, n0d, n1u, n1d) in [(1, 0, 0, 1), (3, 1, 2, 2), (5, 0, 0, 3), (1, 1, 1, 1)] {
            let data = fig3_count_dataset(n0u, n0d, n1u, n1d);
            let v = fit_batch_td0(&data, 1.0).unwrap();
            let expected = (n0u + n1u) as f64 / (n0u + n0d + n1u + n1d) as f64;
            for s in [0usize, 1, 2] {
                assert_abs_diff_eq!(v[&s], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn batch_td0_exact_on_full_deterministic_coverage() {
        let data = fig3_count_dataset(1, 1, 1, 1);
        let v = fit_batch_td0(&data, 1.0).unwrap();
        let exact = dp::policy_evaluation_exact(&builders::fig3(), &builders::fig3_uniform()).unwrap();
        for s in [0usize, 1, 2] {
            assert_abs_diff_eq!(v[&s], exact[s], epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_td0_rejects_dangling_states() {
        let data = Dataset::new(vec![Trajectory {
            steps: vec![Step { state: 0, action: 0, reward: 1.0 }],
            final_state: 1,
            truncated: true,
        }]);
        assert!(matches!(fit_batch_td0(&data, 1.0), Err(Error::NonEpisodic(_))));
    }

    #[test]
    fn batch_td0_near_dp_on_random_mdp() {
        let mdp = builders::random_mdp(17, 6, 3);
        let policy = builders::uniform_policy(&mdp);
        let mut data = Dataset::default();
        let mut seed = 0;
        while data.total_steps() < 50_000 {
            let batch = sample_dataset(&mdp, &policy, 1000 + seed, 2000, 200).unwrap();
            data.trajectories.extend(batch.trajectories);
            seed += 1;
        }
        let v = fit_batch_td0(&data, 1.0).unwrap();
        let exact = dp::policy_evaluation_exact(&mdp, &policy).unwrap();
        for (s, est) in &v {
            assert!((est - exact[*s]).abs() < 0.05, "state {s}: {est} vs {}", exact[*s]);
        }
    }

    #[test]
    fn dae_matches_reference_pseudoinverse_on_count_grid() {
        let policy = builders::fig3_uniform();
        for n0u in 0..4usize {
            for n0d in 0..4usize {
                for n1u in 0..4usize {
                    for n1d in 0..4usize {
                        // The minimizer is unique iff at least three of the
                        // four (start, branch-action) combinations appear;
                        // degenerate vectors are covered by the test below.
                        let combos = [n0u, n0d, n1u, n1d].iter().filter(|&&n| n > 0).count();
                        if combos < 3 {
                            continue;
                        }
                        let data = fig3_count_dataset(n0u, n0d, n1u, n1d);
                        let report = fit_dae(&data, &policy, 1.0, BackupLength::Episode, None).unwrap();
                        let (a_up, v0, v1) =
                            fig3_reference_solution(n0u as f64, n0d as f64, n1u as f64, n1d as f64);
                        assert!(report.unique, "counts ({n0u},{n0d},{n1u},{n1d})");
                        assert_abs_diff_eq!(report.tables.a[&(2, 0)], a_up, epsilon = 1e-10);
                        assert_abs_diff_eq!(report.tables.a[&(2, 1)], -a_up, epsilon = 1e-10);
                        assert_abs_diff_eq!(report.tables.v[&0], v0, epsilon = 1e-10);
                        assert_abs_diff_eq!(report.tables.v[&1], v1, epsilon = 1e-10);
                        // Single-choice states centered to zero advantage.
                        assert_abs_diff_eq!(report.tables.a[&(0, 0)], 0.0, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dae_reports_degenerate_counts_as_non_unique() {
        // Two observed (start, branch-action) combinations leave a free
        // direction in (V(0), V(1), A(2, up)).
        let policy = builders::fig3_uniform();
        for (n0u, n0d, n1u, n1d) in [(1, 0, 1, 0), (0, 1, 0, 1), (1, 0, 0, 1), (2, 0, 0, 1)] {
            let data = fig3_count_dataset(n0u, n0d, n1u, n1d);
            let report = fit_dae(&data, &policy, 1.0, BackupLength::Episode, None).unwrap();
            assert!(!report.unique, "counts ({n0u},{n0d},{n1u},{n1d})");
        }
    }

    #[test]
    fn dae_recovers_dp_on_deterministic_mdp() {
        // Episode-length backup on a deterministic gridworld: the fitted
        // tables must match the dynamic-programming oracles.
        let mdp = builders::gridworld(2, 2, 0.0);
        let policy = builders::uniform_policy(&mdp);
        let data = sample_dataset(&mdp, &policy, 5, 400, 10_000).unwrap();
        assert!(data.trajectories.iter().all(|t| !t.truncated));
        let report = fit_dae(&data, &policy, mdp.discount(), BackupLength::Episode, None).unwrap();
        let exact_v = dp::policy_evaluation_exact(&mdp, &policy).unwrap();
        let exact_a = dp::advantage_exact(&mdp, &policy).unwrap();
        assert!(report.objective_value < 1e-16);
        let start = mdp.initial_dist().iter().position(|&p| p > 0.0).unwrap();
        assert_abs_diff_eq!(report.tables.v[&start], exact_v[start], epsilon = 1e-8);
        for ((s, a), value) in &report.tables.a {
            assert_abs_diff_eq!(*value, exact_a[(*s, *a)], epsilon = 1e-8);
        }

        // Finite backup with the exact bootstrap identifies V everywhere.
        let report = fit_dae(&data, &policy, mdp.discount(), BackupLength::Steps(1), Some(&exact_v)).unwrap();
        for (s, value) in &report.tables.v {
            assert_abs_diff_eq!(*value, exact_v[*s], epsilon = 1e-8);
        }
    }

    #[test]
    fn dae_population_counterexample_bias() {
        let mdp = builders::counterexample();
        let behavior = builders::counterexample_policy(0.5).unwrap();
        let target = builders::counterexample_policy(1.0).unwrap();
        let windows = population_windows(&mdp, &behavior, BackupLength::Episode).unwrap();
        let report = fit_dae_windows(&windows, &target, 1.0, None).unwrap();
        assert_abs_diff_eq!(report.tables.v[&0], 1.0 / 3.0, epsilon = 1e-12);
        // The true target value differs: the uncorrected fit is biased.
        let v_pi = dp::policy_evaluation_exact(&mdp, &target).unwrap()[0];
        assert_abs_diff_eq!(v_pi, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn truncated_episode_backup_needs_bootstrap() {
        let mdp = builders::gridworld(3, 3, 0.0);
        let policy = builders::uniform_policy(&mdp);
        let data = sample_dataset(&mdp, &policy, 1, 50, 2).unwrap();
        assert!(data.trajectories.iter().any(|t| t.truncated));
        assert!(matches!(
            fit_dae(&data, &policy, mdp.discount(), BackupLength::Episode, None),
            Err(Error::TruncatedRequiresBootstrap)
        ));
        let zeros = vec![0.0; mdp.num_states()];
        assert!(fit_dae(&data, &policy, mdp.discount(), BackupLength::Episode, Some(&zeros)).is_ok());
    }

    #[test]
    fn offpolicy_dae_deterministic_reduction() {
        let mdp = builders::fig3();
        let policy = builders::fig3_uniform();
        let data = sample_dataset(&mdp, &policy, 21, 300, 10).unwrap();
        let model = TransitionModel::oracle(&mdp);
        let plain = fit_dae(&data, &policy, 1.0, BackupLength::Episode, None).unwrap();
        let full = fit_offpolicy_dae(&data, &policy, &model, 1.0, BackupLength::Episode, None).unwrap();
        assert!(full.tables.b.max_abs() < 1e-9);
        for (s, v) in &plain.tables.v {
            assert_abs_diff_eq!(*v, full.tables.v[s], epsilon = 1e-9);
        }
        for (k, a) in &plain.tables.a {
            assert_abs_diff_eq!(*a, full.tables.a[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn offpolicy_dae_population_fig4_matches_oracles() {
        let mdp = builders::fig4();
        let policy = builders::fig4_uniform();
        let windows = population_windows(&mdp, &policy, BackupLength::Episode).unwrap();
        assert_eq!(windows.len(), 8);
        let total: f64 = windows.iter().map(|w| w.weight).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);

        let model = TransitionModel::oracle(&mdp);
        let report = fit_offpolicy_dae_windows(&windows, &policy, &model, 1.0, None).unwrap();
        assert!(report.unique);
        let exact_v = dp::policy_evaluation_exact(&mdp, &policy).unwrap();
        let exact_a = dp::advantage_exact(&mdp, &policy).unwrap();
        let exact_b = dp::nature_advantage_exact(&mdp, &policy).unwrap();
        for (s, v) in &report.tables.v {
            assert_abs_diff_eq!(*v, exact_v[*s], epsilon = 1e-8);
        }
        for ((s, a), v) in &report.tables.a {
            assert_abs_diff_eq!(*v, exact_a[(*s, *a)], epsilon = 1e-8);
        }
        for ((s, a, s2), v) in report.tables.b.iter() {
            assert_abs_diff_eq!(*v, exact_b.get(*s, *a, *s2).unwrap(), epsilon = 1e-8);
        }
    }

    #[test]
    fn offpolicy_dae_sampled_random_mdp() {
        let mdp = builders::random_mdp(3, 6, 3);
        let behavior = builders::uniform_policy(&mdp);
        let target = builders::random_policy(77, &mdp);
        let mut data = Dataset::default();
        let mut seed = 0;
        while data.total_steps() < 50_000 {
            let batch = sample_dataset(&mdp, &behavior, 400 + seed, 2000, 200).unwrap();
            data.trajectories.extend(batch.trajectories);
            seed += 1;
        }
        let model = TransitionModel::oracle(&mdp);
        let report =
            fit_offpolicy_dae(&data, &target, &model, 1.0, BackupLength::Steps(2), None).unwrap();
        let exact_v = dp::policy_evaluation_exact(&mdp, &target).unwrap();
        for (s, v) in &report.tables.v {
            assert!((v - exact_v[*s]).abs() < 0.05, "state {s}: {v} vs {}", exact_v[*s]);
        }
    }

    #[test]
    fn offpolicy_dae_names_unsupported_transition() {
        let mdp = builders::fig4();
        let policy = builders::fig4_uniform();
        let data = sample_dataset(&mdp, &policy, 8, 200, 20).unwrap();
        // Model built from a sliver of data that misses some transition.
        let thin = Dataset::new(vec![data.trajectories[0].clone()]);
        let model = crate::transition_model::estimate_transitions(&thin);
        let err = fit_offpolicy_dae(&data, &policy, &model, 1.0, BackupLength::Episode, None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedTransition { .. }), "{err}");
    }

    #[test]
    fn population_window_weights_fig3() {
        let mdp = builders::fig3();
        let policy = builders::fig3_uniform();
        let windows = population_windows(&mdp, &policy, BackupLength::Episode).unwrap();
        assert_eq!(windows.len(), 4);
        let mut weights: Vec<f64> = windows.iter().map(|w| w.weight).collect();
        weights.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(weights[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[1], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[2], 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[3], 0.45, epsilon = 1e-12);

        // One-step windows: total weight equals total expected visits.
        let windows = population_windows(&mdp, &policy, BackupLength::Steps(0)).unwrap();
        let total: f64 = windows.iter().map(|w| w.weight).sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn population_episode_rejects_cycles() {
        let mdp = builders::gridworld(2, 2, 0.0);
        let policy = builders::uniform_policy(&mdp);
        assert!(matches!(
            population_windows(&mdp, &policy, BackupLength::Episode),
            Err(Error::Config(_))
        ));
        // Finite-length windows are fine on cyclic graphs.
        assert!(population_windows(&mdp, &policy, BackupLength::Steps(1)).is_ok());
    }

    #[test]
    fn fit_report_csv_has_header_and_entries() {
        let data = fig3_count_dataset(2, 1, 1, 2);
        let report = fit_dae(&data, &builders::fig3_uniform(), 1.0, BackupLength::Episode, None).unwrap();
        let csv = report.tables.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "entity,index,value");
        assert!(csv.contains("V,0,"));
        assert!(csv.contains("A,2:0,"));
    }
}

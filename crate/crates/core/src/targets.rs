//! Multi-step critic targets: the uncorrected n-step return, the tree
//! backup recursion, and the corrected-target hierarchy that subtracts
//! advantage and nature-advantage terms from the uncorrected return.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fit::DecompositionTables;
use crate::mdp::PolicyTable;
use crate::trajectory::Window;

/// `sum_t gamma^t r_t + gamma^k V_target(s_k)`, with a zero bootstrap at
/// terminal window ends.
pub fn uncorrected_target(window: &Window, bootstrap: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut scale = 1.0;
    for step in window.steps {
        total += scale * step.reward;
        scale *= gamma;
    }
    if !window.end_terminal {
        total += scale * bootstrap[window.end_state];
    }
    total
}

/// Tree backup target for the window's first state-action pair,
/// recursively mixing bootstrap values of non-taken actions under the
/// target policy. Terminal successors cut the recursion.
pub fn tree_backup_target(
    window: &Window,
    q_target: &DMatrix<f64>,
    target_policy: &PolicyTable,
    gamma: f64,
) -> f64 {
    debug_assert!(!window.is_empty());
    tree_backup_from(window, 0, q_target, target_policy, gamma)
}

fn tree_backup_from(
    window: &Window,
    t: usize,
    q_target: &DMatrix<f64>,
    target_policy: &PolicyTable,
    gamma: f64,
) -> f64 {
    let step = &window.steps[t];
    let next = window.next_state(t);
    if t + 1 >= window.len() {
        // Recursion base: bootstrap every action of the successor state.
        if window.end_terminal {
            return step.reward;
        }
        let expected: f64 = (0..target_policy.num_actions())
            .map(|a| target_policy.prob(next, a) * q_target[(next, a)])
            .sum();
        return step.reward + gamma * expected;
    }
    let taken = window.steps[t + 1].action;
    let mut mix = target_policy.prob(next, taken) * tree_backup_from(window, t + 1, q_target, target_policy, gamma);
    for a in 0..target_policy.num_actions() {
        if a != taken {
            mix += target_policy.prob(next, a) * q_target[(next, a)];
        }
    }
    step.reward + gamma * mix
}

/// Which correction terms the critic target subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyMethod {
    Uncorrected,
    Dae,
    OffpolicyDae,
}

/// The corrected regression target: the uncorrected return, minus
/// `sum_t gamma^t A_t` for the advantage-corrected method, minus
/// additionally `sum_t gamma^(t+1) B_t` for the transition-corrected one.
/// Absent table entries contribute zero.
pub fn critic_target_hierarchy(
    window: &Window,
    tables: &DecompositionTables,
    bootstrap: Option<&[f64]>,
    gamma: f64,
    method: HierarchyMethod,
) -> Result<f64> {
    let bootstrap = match (window.end_terminal, bootstrap) {
        (true, _) => &[][..],
        (false, Some(v)) => v,
        (false, None) => {
            return Err(Error::Config(
                "non-terminal window end requires a bootstrap value table".into(),
            ))
        }
    };
    let mut total = 0.0;
    let mut scale = 1.0;
    for (t, step) in window.steps.iter().enumerate() {
        total += scale * step.reward;
        if method != HierarchyMethod::Uncorrected {
            total -= scale * tables.a_or_zero(step.state, step.action);
        }
        if method == HierarchyMethod::OffpolicyDae {
            total -= scale * gamma * tables.b_or_zero(step.state, step.action, window.next_state(t));
        }
        scale *= gamma;
    }
    if !window.end_terminal {
        total += scale * bootstrap[window.end_state];
    }
    Ok(total)
}

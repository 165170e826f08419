//! Trajectory feature maps for the regression view of return estimation:
//! start-state indicators and discounted state-action / transition
//! occupancies.

use std::collections::BTreeMap;

use crate::trajectory::Trajectory;

/// Identifier of one regression feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureId {
    /// Indicator of the start state.
    Start(usize),
    /// Discounted occupancy of a state-action pair.
    StateAction(usize, usize),
    /// Discounted occupancy of a transition.
    Transition(usize, usize, usize),
}

/// Which feature map to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    StartState,
    StateAction,
    Transition,
}

/// Sparse feature vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    weights: BTreeMap<FeatureId, f64>,
}

impl FeatureVector {
    pub fn get(&self, id: FeatureId) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureId, &f64)> {
        self.weights.iter()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn add(&mut self, id: FeatureId, w: f64) {
        *self.weights.entry(id).or_insert(0.0) += w;
    }
}

/// Maps a trajectory to features. Start-state mode yields the indicator
/// of `s_0`; the occupancy modes accumulate `gamma^t` per visit.
pub fn build_features(traj: &Trajectory, gamma: f64, mode: FeatureMode) -> FeatureVector {
    let mut fv = FeatureVector::default();
    match mode {
        FeatureMode::StartState => {
            if let Some(first) = traj.steps.first() {
                fv.add(FeatureId::Start(first.state), 1.0);
            }
        }
        FeatureMode::StateAction => {
            let mut scale = 1.0;
            for step in &traj.steps {
                fv.add(FeatureId::StateAction(step.state, step.action), scale);
                scale *= gamma;
            }
        }
        FeatureMode::Transition => {
            let mut scale = 1.0;
            for (t, step) in traj.steps.iter().enumerate() {
                fv.add(FeatureId::Transition(step.state, step.action, traj.next_state(t)), scale);
                scale *= gamma;
            }
        }
    }
    fv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Step;

    fn fig3_traj() -> Trajectory {
        Trajectory {
            steps: vec![
                Step { state: 0, action: 0, reward: 0.0 },
                Step { state: 2, action: 0, reward: 1.0 },
            ],
            final_state: 3,
            truncated: false,
        }
    }

    #[test]
    fn state_action_counts() {
        let fv = build_features(&fig3_traj(), 1.0, FeatureMode::StateAction);
        assert_eq!(fv.len(), 2);
        assert_eq!(fv.get(FeatureId::StateAction(0, 0)), 1.0);
        assert_eq!(fv.get(FeatureId::StateAction(2, 0)), 1.0);
    }

    #[test]
    fn start_state_is_single_indicator() {
        let fv = build_features(&fig3_traj(), 0.7, FeatureMode::StartState);
        assert_eq!(fv.len(), 1);
        assert_eq!(fv.get(FeatureId::Start(0)), 1.0);
    }

    #[test]
    fn zero_discount_keeps_only_first_step() {
        let fv = build_features(&fig3_traj(), 0.0, FeatureMode::StateAction);
        assert_eq!(fv.get(FeatureId::StateAction(0, 0)), 1.0);
        assert_eq!(fv.get(FeatureId::StateAction(2, 0)), 0.0);
    }

    #[test]
    fn transition_features_use_final_state() {
        let fv = build_features(&fig3_traj(), 0.5, FeatureMode::Transition);
        assert_eq!(fv.get(FeatureId::Transition(0, 0, 2)), 1.0);
        assert_eq!(fv.get(FeatureId::Transition(2, 0, 3)), 0.5);
    }

    #[test]
    fn repeated_visits_accumulate() {
        let traj = Trajectory {
            steps: vec![
                Step { state: 1, action: 0, reward: 0.0 },
                Step { state: 1, action: 0, reward: 0.0 },
            ],
            final_state: 2,
            truncated: false,
        };
        let fv = build_features(&traj, 0.5, FeatureMode::StateAction);
        assert_eq!(fv.get(FeatureId::StateAction(1, 0)), 1.5);
    }
}

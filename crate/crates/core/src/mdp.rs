//! Finite discounted MDPs with explicit terminal states, plus stochastic
//! tabular policies.
//!
//! Terminal states follow a fixed convention: they self-loop with
//! probability 1 and pay reward 0, so episodic returns and the
//! infinite-horizon formulas coincide. States with fewer distinct choices
//! than `num_actions` are represented by duplicating the transition row;
//! the canonical policies in [`crate::builders`] put all mass on action 0
//! at such states.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;

/// Flat index into a row-major `(state, action, next_state)` tensor.
#[inline]
pub(crate) fn sas_index(num_actions: usize, num_states: usize, s: usize, a: usize, s2: usize) -> usize {
    (s * num_actions + a) * num_states + s2
}

/// A finite discounted MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `(s, a, s')` transition probabilities.
    transition: Vec<f64>,
    /// Expected reward per `(s, a)`.
    reward: DMatrix<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

impl FiniteMdp {
    /// Validates and builds an MDP. `transition` is row-major `(s, a, s')`
    /// with `num_states * num_actions * num_states` entries and `reward`
    /// is row-major `(s, a)`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("state and action counts must be positive".into()));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::InvalidMdp(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if reward.len() != num_states * num_actions {
            return Err(Error::InvalidMdp(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                num_states * num_actions
            )));
        }
        if initial_dist.len() != num_states || terminal.len() != num_states {
            return Err(Error::InvalidMdp("initial_dist/terminal length mismatch".into()));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!("discount {discount} outside [0, 1]")));
        }

        let reward = DMatrix::from_fn(num_states, num_actions, |s, a| reward[s * num_actions + a]);
        let mdp = Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.transition_row(s, a);
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
                    return Err(Error::InvalidMdp(format!("transition row ({s},{a}) has entries outside [0, 1]")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s},{a}) sums to {sum}, expected 1"
                    )));
                }
                if self.terminal[s] {
                    if self.p(s, a, s) != 1.0 {
                        return Err(Error::InvalidMdp(format!(
                            "terminal state {s} must self-loop with probability 1"
                        )));
                    }
                    if self.reward[(s, a)] != 0.0 {
                        return Err(Error::InvalidMdp(format!("terminal state {s} must have zero reward")));
                    }
                }
            }
        }
        let init_sum: f64 = self.initial_dist.iter().sum();
        if (init_sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidMdp(format!("initial distribution sums to {init_sum}")));
        }
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidMdp(format!("initial probability of state {s} is {p}")));
            }
            if p > 0.0 && self.terminal[s] {
                return Err(Error::InvalidMdp(format!("initial distribution puts mass on terminal state {s}")));
            }
        }
        if self.discount >= 1.0 {
            if let Some(trap) = self.non_episodic_trap() {
                return Err(Error::NonEpisodic(format!(
                    "discount is 1 but some policy can avoid termination forever within states {trap:?}"
                )));
            }
        }
        Ok(())
    }

    /// Largest set of non-terminal states from which some policy keeps all
    /// probability mass inside the set forever. Empty means every policy
    /// terminates almost surely.
    fn non_episodic_trap(&self) -> Option<Vec<usize>> {
        let mut inside: Vec<bool> = self.terminal.iter().map(|&t| !t).collect();
        loop {
            let mut removed = false;
            for s in 0..self.num_states {
                if !inside[s] {
                    continue;
                }
                let has_confined_action = (0..self.num_actions).any(|a| {
                    self.successors(s, a).all(|(s2, _)| inside[s2])
                });
                if !has_confined_action {
                    inside[s] = false;
                    removed = true;
                }
            }
            if !removed {
                break;
            }
        }
        let trap: Vec<usize> = (0..self.num_states).filter(|&s| inside[s]).collect();
        if trap.is_empty() {
            None
        } else {
            Some(trap)
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[sas_index(self.num_actions, self.num_states, s, a, s2)]
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = sas_index(self.num_actions, self.num_states, s, a, 0);
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[(s, a)]
    }

    pub fn reward_table(&self) -> &DMatrix<f64> {
        &self.reward
    }

    /// Successor states of `(s, a)` with positive probability.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.transition_row(s, a)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s2, &p)| (s2, p))
    }

    /// All `(s, a, s')` with positive probability and non-terminal `s`.
    pub fn support_transitions(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.num_states {
            if self.terminal[s] {
                continue;
            }
            for a in 0..self.num_actions {
                for (s2, _) in self.successors(s, a) {
                    out.push((s, a, s2));
                }
            }
        }
        out
    }

    /// True when every transition row is one-hot.
    pub fn is_deterministic(&self) -> bool {
        (0..self.num_states).all(|s| {
            (0..self.num_actions).all(|a| self.transition_row(s, a).iter().all(|&p| p == 0.0 || p == 1.0))
        })
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0f64, |m, &r| m.max(r.abs()))
    }

    /// Serializes to the plain-text key-value format.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("mdp-v1\n");
        writeln!(out, "num_states {}", self.num_states).unwrap();
        writeln!(out, "num_actions {}", self.num_actions).unwrap();
        writeln!(out, "discount {}", self.discount).unwrap();
        let flags: Vec<String> = self.terminal.iter().map(|&t| if t { "1".into() } else { "0".into() }).collect();
        writeln!(out, "terminal {}", flags.join(" ")).unwrap();
        let init: Vec<String> = self.initial_dist.iter().map(|p| format!("{p}")).collect();
        writeln!(out, "initial_dist {}", init.join(" ")).unwrap();
        let reward: Vec<String> = (0..self.num_states)
            .flat_map(|s| (0..self.num_actions).map(move |a| (s, a)))
            .map(|(s, a)| format!("{}", self.reward[(s, a)]))
            .collect();
        writeln!(out, "reward {}", reward.join(" ")).unwrap();
        let trans: Vec<String> = self.transition.iter().map(|p| format!("{p}")).collect();
        writeln!(out, "transition {}", trans.join(" ")).unwrap();
        out
    }

    /// Parses the format written by [`FiniteMdp::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty mdp file".into()))?;
        if header.trim() != "mdp-v1" {
            return Err(Error::Parse(format!("unknown mdp header {header:?}")));
        }
        let mut num_states = None;
        let mut num_actions = None;
        let mut discount = None;
        let mut terminal = None;
        let mut initial = None;
        let mut reward = None;
        let mut transition = None;
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().ok_or_else(|| Error::Parse("blank line".into()))?;
            let rest: Vec<&str> = parts.collect();
            let floats = |rest: &[&str]| -> Result<Vec<f64>> {
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad float {t:?}: {e}"))))
                    .collect()
            };
            match key {
                "num_states" => num_states = Some(parse_usize(&rest)?),
                "num_actions" => num_actions = Some(parse_usize(&rest)?),
                "discount" => discount = Some(floats(&rest)?[0]),
                "terminal" => {
                    terminal = Some(
                        rest.iter()
                            .map(|t| match *t {
                                "0" => Ok(false),
                                "1" => Ok(true),
                                other => Err(Error::Parse(format!("bad terminal flag {other:?}"))),
                            })
                            .collect::<Result<Vec<bool>>>()?,
                    )
                }
                "initial_dist" => initial = Some(floats(&rest)?),
                "reward" => reward = Some(floats(&rest)?),
                "transition" => transition = Some(floats(&rest)?),
                other => return Err(Error::Parse(format!("unknown mdp key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Parse(format!("mdp file missing {what}"));
        Self::new(
            num_states.ok_or_else(|| missing("num_states"))?,
            num_actions.ok_or_else(|| missing("num_actions"))?,
            transition.ok_or_else(|| missing("transition"))?,
            reward.ok_or_else(|| missing("reward"))?,
            discount.ok_or_else(|| missing("discount"))?,
            initial.ok_or_else(|| missing("initial_dist"))?,
            terminal.ok_or_else(|| missing("terminal"))?,
        )
    }
}

fn parse_usize(rest: &[&str]) -> Result<usize> {
    rest.first()
        .ok_or_else(|| Error::Parse("missing value".into()))?
        .parse::<usize>()
        .map_err(|e| Error::Parse(format!("bad integer: {e}")))
}

/// A stochastic tabular policy: one distribution over actions per state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    probs: DMatrix<f64>,
}

impl PolicyTable {
    /// Builds from a row-major `(s, a)` probability table.
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::Config(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        let probs = DMatrix::from_fn(num_states, num_actions, |s, a| probs[s * num_actions + a]);
        let table = Self { probs };
        table.validate()?;
        Ok(table)
    }

    /// Uniform over all actions in every state.
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// Deterministic policy from an action index per state.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::Config(format!("action {a} out of range at state {s}")));
            }
            probs[(s, a)] = 1.0;
        }
        Ok(Self { probs })
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.num_states() {
            let row = self.probs.row(s);
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::Config(format!("policy row {s} has negative entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::Config(format!("policy row {s} sums to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        self.probs.row(s).iter().copied().collect()
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// Checks that the policy shape matches the MDP.
    pub fn check_shape(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.num_states() != mdp.num_states() || self.num_actions() != mdp.num_actions() {
            return Err(Error::Config(format!(
                "policy shape {}x{} does not match mdp {}x{}",
                self.num_states(),
                self.num_actions(),
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }

    /// Greedy action per state, ties broken by the lowest action index.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.num_states())
            .map(|s| {
                let mut best = 0;
                for a in 1..self.num_actions() {
                    if self.probs[(s, a)] > self.probs[(s, best)] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }
}

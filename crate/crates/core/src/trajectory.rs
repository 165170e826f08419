//! Sampled episodes, datasets, and backup windows.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, PolicyTable};

/// One environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// A sampled episode. `truncated` is true when the episode was cut at a
/// length limit rather than at a terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: usize,
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of `discount^t * reward_t` over the episode's steps.
    pub fn discounted_return(&self, discount: f64) -> f64 {
        discounted_return(self, discount)
    }

    /// State following step `t`: the next step's state, or the final state.
    pub fn next_state(&self, t: usize) -> usize {
        if t + 1 < self.steps.len() {
            self.steps[t + 1].state
        } else {
            self.final_state
        }
    }

    /// Backup windows: with a finite backup length `n`, one window per
    /// start index covering at most `n + 1` steps; with an episode-length
    /// backup, the whole trajectory once.
    pub fn windows(&self, backup: BackupLength) -> Vec<Window<'_>> {
        match backup {
            BackupLength::Episode => {
                vec![self.window_at(0, self.steps.len())]
            }
            BackupLength::Steps(n) => (0..self.steps.len())
                .map(|start| {
                    let len = (n + 1).min(self.steps.len() - start);
                    self.window_at(start, len)
                })
                .collect(),
        }
    }

    fn window_at(&self, start: usize, len: usize) -> Window<'_> {
        let end_of_traj = start + len == self.steps.len();
        Window {
            steps: &self.steps[start..start + len],
            end_state: if end_of_traj { self.final_state } else { self.steps[start + len].state },
            end_terminal: end_of_traj && !self.truncated,
        }
    }
}

/// Returns `sum_t discount^t * r_t`.
pub fn discounted_return(traj: &Trajectory, discount: f64) -> f64 {
    let mut total = 0.0;
    let mut scale = 1.0;
    for step in &traj.steps {
        total += scale * step.reward;
        scale *= discount;
    }
    total
}

/// Backup length: `Steps(n)` uses `n + 1` transitions before
/// bootstrapping, `Episode` uses complete trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackupLength {
    Steps(usize),
    Episode,
}

/// A contiguous view of a trajectory used as one backup term.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub steps: &'a [Step],
    pub end_state: usize,
    /// True when the window ends at a terminal state, which pins the tail
    /// value to zero.
    pub end_terminal: bool,
}

impl<'a> Window<'a> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of discounted rewards over the window.
    pub fn reward_sum(&self, discount: f64) -> f64 {
        let mut total = 0.0;
        let mut scale = 1.0;
        for step in self.steps {
            total += scale * step.reward;
            scale *= discount;
        }
        total
    }

    /// State following step `t` inside the window.
    pub fn next_state(&self, t: usize) -> usize {
        if t + 1 < self.steps.len() {
            self.steps[t + 1].state
        } else {
            self.end_state
        }
    }
}

/// A collection of trajectories; the unit of all fitting. The behavior
/// policy that produced the data is intentionally not stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// One line per trajectory: `s a r s a r ... s_final T|X` where `T`
    /// marks a terminal ending and `X` a truncated one.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for traj in &self.trajectories {
            let mut parts: Vec<String> = Vec::with_capacity(traj.len() * 3 + 2);
            for step in &traj.steps {
                parts.push(step.state.to_string());
                parts.push(step.action.to_string());
                parts.push(format!("{}", step.reward));
            }
            parts.push(traj.final_state.to_string());
            parts.push(if traj.truncated { "X".into() } else { "T".into() });
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`Dataset::to_lines`].
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut trajectories = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() < 2 || (tokens.len() - 2) % 3 != 0 {
                return Err(Error::Parse(format!("line {}: malformed trajectory", lineno + 1)));
            }
            let truncated = match *tokens.last().unwrap() {
                "T" => false,
                "X" => true,
                other => return Err(Error::Parse(format!("line {}: bad end marker {other:?}", lineno + 1))),
            };
            let final_state = tokens[tokens.len() - 2]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            let mut steps = Vec::new();
            for chunk in tokens[..tokens.len() - 2].chunks(3) {
                let state = chunk[0]
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
                let action = chunk[1]
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
                let reward = chunk[2]
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
                steps.push(Step { state, action, reward });
            }
            trajectories.push(Trajectory { steps, final_state, truncated });
        }
        Ok(Self { trajectories })
    }
}

/// Samples one episode from the MDP under the policy. Deterministic for a
/// fixed seed.
pub fn sample_trajectory(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    rng_seed: u64,
    max_len: usize,
) -> Result<Trajectory> {
    policy.check_shape(mdp)?;
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(sample_with_rng(mdp, policy, &mut rng, max_len))
}

/// Samples `count` episodes from one seeded stream.
pub fn sample_dataset(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    rng_seed: u64,
    count: usize,
    max_len: usize,
) -> Result<Dataset> {
    policy.check_shape(mdp)?;
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let trajectories = (0..count).map(|_| sample_with_rng(mdp, policy, &mut rng, max_len)).collect();
    Ok(Dataset::new(trajectories))
}

pub(crate) fn sample_with_rng<R: Rng>(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    rng: &mut R,
    max_len: usize,
) -> Trajectory {
    let mut state = sample_index(mdp.initial_dist(), rng);
    let mut steps = Vec::new();
    while steps.len() < max_len && !mdp.is_terminal(state) {
        let action = sample_index(&policy.row(state), rng);
        let reward = mdp.reward(state, action);
        let next = sample_index(mdp.transition_row(state, action), rng);
        steps.push(Step { state, action, reward });
        state = next;
    }
    Trajectory {
        steps,
        final_state: state,
        truncated: !mdp.is_terminal(state),
    }
}

/// Draws an index from a probability vector by inverse CDF.
pub(crate) fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Guard against accumulated rounding: fall back to the last positive entry.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("probability vector has no mass")
}

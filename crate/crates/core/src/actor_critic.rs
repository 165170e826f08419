//! Tabular off-policy actor-critic: replay of n-step segments, a
//! switchable critic backup (uncorrected, advantage-corrected,
//! transition-corrected, or tree), EMA target tables, a KL trust-region
//! penalty on the actor, and advantage normalization.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{sas_index, FiniteMdp, PolicyTable};
use crate::seeds::split_seed;
use crate::targets::tree_backup_target;
use crate::trajectory::{sample_index, BackupLength, Step, Trajectory};
use crate::transition_model::{ModelKind, TransitionModel};

/// Critic backup choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticMethod {
    Uncorrected,
    Dae,
    OffpolicyDae,
    Tree,
}

impl CriticMethod {
    pub const ALL: [CriticMethod; 4] = [
        CriticMethod::Uncorrected,
        CriticMethod::Dae,
        CriticMethod::OffpolicyDae,
        CriticMethod::Tree,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CriticMethod::Uncorrected => "uncorrected",
            CriticMethod::Dae => "dae",
            CriticMethod::OffpolicyDae => "offpolicy-dae",
            CriticMethod::Tree => "tree",
        }
    }
}

impl fmt::Display for CriticMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriticMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncorrected" => Ok(CriticMethod::Uncorrected),
            "dae" => Ok(CriticMethod::Dae),
            "offpolicy-dae" => Ok(CriticMethod::OffpolicyDae),
            "tree" => Ok(CriticMethod::Tree),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected uncorrected|dae|offpolicy-dae|tree)"
            ))),
        }
    }
}

/// Training hyperparameters. The learning rate anneals linearly to zero
/// over `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: CriticMethod,
    /// Stored segment length; suffix windows of each segment feed the
    /// critic loss.
    pub backup_length: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub tau: f64,
    pub beta_kl: f64,
    /// Batch size in environment steps.
    pub batch_size: usize,
    pub steps_per_update: usize,
    /// Replay capacity in environment steps.
    pub buffer_capacity: usize,
    pub initial_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Transition model used to center nature's advantage
    /// (transition-corrected critic only).
    pub model_kind: ModelKind,
    pub num_actors: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub max_episode_len: usize,
}

impl TrainConfig {
    pub fn new(method: CriticMethod) -> Self {
        Self {
            method,
            backup_length: 8,
            gamma: 0.99,
            learning_rate: 0.05,
            tau: 0.99,
            beta_kl: 3.0,
            batch_size: 512,
            steps_per_update: 32,
            buffer_capacity: 20_000,
            initial_steps: 1_000,
            total_steps: 50_000,
            seed: 0,
            model_kind: ModelKind::Empirical,
            num_actors: 8,
            eval_every: 1_000,
            eval_episodes: 100,
            max_episode_len: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("backup_length", self.backup_length),
            ("batch_size", self.batch_size),
            ("steps_per_update", self.steps_per_update),
            ("buffer_capacity", self.buffer_capacity),
            ("total_steps", self.total_steps),
            ("num_actors", self.num_actors),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("max_episode_len", self.max_episode_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.learning_rate <= 0.0 || self.beta_kl < 0.0 {
            return Err(Error::Config("learning_rate must be positive and beta_kl non-negative".into()));
        }
        if self.buffer_capacity < self.backup_length {
            return Err(Error::Config("buffer_capacity smaller than one segment".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting; used by both the config-file
    /// parser and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::Parse(format!("bad value {value:?} for {key}: {e}")))
        }
        match key {
            "method" => self.method = value.parse()?,
            "n" | "backup_length" => self.backup_length = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "beta_kl" => self.beta_kl = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps_per_update" => self.steps_per_update = num(key, value)?,
            "buffer_capacity" => self.buffer_capacity = num(key, value)?,
            "initial_steps" => self.initial_steps = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "model" | "transition_model" => {
                self.model_kind = match value {
                    "oracle" => ModelKind::Oracle,
                    "empirical" => ModelKind::Empirical,
                    other => return Err(Error::Parse(format!("unknown transition model {other:?}"))),
                }
            }
            "actors" | "num_actors" => self.num_actors = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "max_episode_len" => self.max_episode_len = num(key, value)?,
            other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a plain `key = value` config file (one setting per line,
    /// `#` comments).
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// FIFO replay buffer of n-step segments with a step-count capacity.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    segments: VecDeque<Trajectory>,
    steps: usize,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            segments: VecDeque::new(),
            steps: 0,
            capacity,
        }
    }

    /// Pushes a segment and evicts the oldest segments while over
    /// capacity.
    pub fn push(&mut self, segment: Trajectory) {
        self.steps += segment.len();
        self.segments.push_back(segment);
        while self.steps > self.capacity {
            let evicted = self.segments.pop_front().expect("steps > 0 implies segments");
            self.steps -= evicted.len();
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn oldest(&self) -> Option<&Trajectory> {
        self.segments.front()
    }

    /// Uniform sample (with replacement) of segments totalling at least
    /// `batch_steps` steps.
    pub fn sample<R: Rng>(&self, rng: &mut R, batch_steps: usize) -> Vec<Trajectory> {
        let mut out = Vec::new();
        let mut steps = 0;
        while steps < batch_steps && !self.segments.is_empty() {
            let segment = &self.segments[rng.random_range(0..self.segments.len())];
            steps += segment.len();
            out.push(segment.clone());
        }
        out
    }
}

/// Learned tables plus their EMA copies, the replay buffer, and the
/// running transition counts.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub logits: DMatrix<f64>,
    pub values: Vec<f64>,
    /// Unconstrained advantage table; centered under the EMA policy at
    /// use time.
    pub advantage: DMatrix<f64>,
    /// Unconstrained nature-advantage table, row-major `(s, a, s')`;
    /// centered under the transition model at use time.
    pub luck: Vec<f64>,
    pub logits_ema: DMatrix<f64>,
    pub values_ema: Vec<f64>,
    pub advantage_ema: DMatrix<f64>,
    pub luck_ema: Vec<f64>,
    pub buffer: ReplayBuffer,
    pub env_steps: u64,
    transition_counts: BTreeMap<(usize, usize, usize), u64>,
    num_states: usize,
    num_actions: usize,
}

impl AgentState {
    pub fn new(num_states: usize, num_actions: usize, buffer_capacity: usize) -> Self {
        Self {
            logits: DMatrix::zeros(num_states, num_actions),
            values: vec![0.0; num_states],
            advantage: DMatrix::zeros(num_states, num_actions),
            luck: vec![0.0; num_states * num_actions * num_states],
            logits_ema: DMatrix::zeros(num_states, num_actions),
            values_ema: vec![0.0; num_states],
            advantage_ema: DMatrix::zeros(num_states, num_actions),
            luck_ema: vec![0.0; num_states * num_actions * num_states],
            buffer: ReplayBuffer::new(buffer_capacity),
            env_steps: 0,
            transition_counts: BTreeMap::new(),
            num_states,
            num_actions,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Current actor distribution.
    pub fn policy(&self) -> PolicyTable {
        softmax_policy(&self.logits)
    }

    /// Smoothed target policy.
    pub fn target_policy(&self) -> PolicyTable {
        softmax_policy(&self.logits_ema)
    }

    /// Advantage table centered under the EMA policy.
    pub fn centered_advantage(&self) -> DMatrix<f64> {
        center_advantage(&self.advantage, &self.target_policy())
    }

    /// EMA advantage table centered under the EMA policy.
    pub fn centered_advantage_ema(&self) -> DMatrix<f64> {
        center_advantage(&self.advantage_ema, &self.target_policy())
    }

    /// Nature's advantage centered under the given transition model;
    /// transitions outside the model's support read as zero.
    pub fn centered_luck(&self, model: &TransitionModel, s: usize, a: usize, s2: usize) -> f64 {
        let Some(row) = model.row(s, a) else { return 0.0 };
        let raw = self.luck[sas_index(self.num_actions, self.num_states, s, a, s2)];
        let mean: f64 = row
            .iter()
            .map(|&(k, p)| p * self.luck[sas_index(self.num_actions, self.num_states, s, a, k)])
            .sum();
        raw - mean
    }

    pub fn record_transition(&mut self, s: usize, a: usize, s2: usize) {
        *self.transition_counts.entry((s, a, s2)).or_insert(0) += 1;
    }

    /// Empirical transition model from every environment transition seen
    /// so far.
    pub fn empirical_model(&self) -> TransitionModel {
        TransitionModel::from_counts(self.transition_counts.clone())
    }

    /// Greedy actions of the actor, ties broken by the lowest index.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.num_states)
            .map(|s| {
                let mut best = 0;
                for a in 1..self.num_actions {
                    if self.logits[(s, a)] > self.logits[(s, best)] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }

    /// Serializes the learned tables (not the buffer or counts).
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("agent-v1\n");
        writeln!(out, "states {}", self.num_states).unwrap();
        writeln!(out, "actions {}", self.num_actions).unwrap();
        writeln!(out, "env_steps {}", self.env_steps).unwrap();
        let mat = |m: &DMatrix<f64>| {
            let mut parts = Vec::with_capacity(m.nrows() * m.ncols());
            for s in 0..m.nrows() {
                for a in 0..m.ncols() {
                    parts.push(format!("{}", m[(s, a)]));
                }
            }
            parts.join(" ")
        };
        let vec = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "logits {}", mat(&self.logits)).unwrap();
        writeln!(out, "values {}", vec(&self.values)).unwrap();
        writeln!(out, "advantage {}", mat(&self.advantage)).unwrap();
        writeln!(out, "luck {}", vec(&self.luck)).unwrap();
        writeln!(out, "logits_ema {}", mat(&self.logits_ema)).unwrap();
        writeln!(out, "values_ema {}", vec(&self.values_ema)).unwrap();
        writeln!(out, "advantage_ema {}", mat(&self.advantage_ema)).unwrap();
        writeln!(out, "luck_ema {}", vec(&self.luck_ema)).unwrap();
        out
    }

    /// Restores tables from [`AgentState::to_text`] output; the buffer
    /// starts empty with the given capacity.
    pub fn from_text(text: &str, buffer_capacity: usize) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("agent-v1") => {}
            other => return Err(Error::Parse(format!("unknown agent header {other:?}"))),
        }
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("malformed agent line {line:?}")))?;
            fields.insert(key, value);
        }
        let get = |key: &str| fields.get(key).ok_or_else(|| Error::Parse(format!("agent file missing {key}")));
        let num_states: usize = get("states")?.parse().map_err(|e| Error::Parse(format!("states: {e}")))?;
        let num_actions: usize = get("actions")?.parse().map_err(|e| Error::Parse(format!("actions: {e}")))?;
        let env_steps: u64 = get("env_steps")?.parse().map_err(|e| Error::Parse(format!("env_steps: {e}")))?;
        let floats = |key: &str, expect: usize| -> Result<Vec<f64>> {
            let raw = get(key)?;
            let v: Vec<f64> = raw
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{key}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != expect {
                return Err(Error::Parse(format!("{key} has {} values, expected {expect}", v.len())));
            }
            Ok(v)
        };
        let matrix = |key: &str| -> Result<DMatrix<f64>> {
            let flat = floats(key, num_states * num_actions)?;
            Ok(DMatrix::from_fn(num_states, num_actions, |s, a| flat[s * num_actions + a]))
        };
        Ok(Self {
            logits: matrix("logits")?,
            values: floats("values", num_states)?,
            advantage: matrix("advantage")?,
            luck: floats("luck", num_states * num_actions * num_states)?,
            logits_ema: matrix("logits_ema")?,
            values_ema: floats("values_ema", num_states)?,
            advantage_ema: matrix("advantage_ema")?,
            luck_ema: floats("luck_ema", num_states * num_actions * num_states)?,
            buffer: ReplayBuffer::new(buffer_capacity),
            env_steps,
            transition_counts: BTreeMap::new(),
            num_states,
            num_actions,
        })
    }
}

fn softmax_policy(logits: &DMatrix<f64>) -> PolicyTable {
    let (ns, na) = logits.shape();
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        probs.extend(softmax_row(logits, s));
    }
    PolicyTable::new(ns, na, probs).expect("softmax rows are distributions")
}

fn softmax_row(logits: &DMatrix<f64>, s: usize) -> Vec<f64> {
    let na = logits.ncols();
    let max = (0..na).map(|a| logits[(s, a)]).fold(f64::NEG_INFINITY, f64::max);
    let mut row: Vec<f64> = (0..na).map(|a| (logits[(s, a)] - max).exp()).collect();
    let sum: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= sum;
    }
    row
}

fn center_advantage(raw: &DMatrix<f64>, policy: &PolicyTable) -> DMatrix<f64> {
    let (ns, na) = raw.shape();
    DMatrix::from_fn(ns, na, |s, a| {
        let mean: f64 = (0..na).map(|a2| policy.prob(s, a2) * raw[(s, a2)]).sum();
        raw[(s, a)] - mean
    })
}

/// Gradients of the critic loss with respect to the value, advantage,
/// and nature-advantage tables.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub values: Vec<f64>,
    pub advantage: DMatrix<f64>,
    pub luck: Vec<f64>,
}

/// Mean squared error of the method's critic target over all suffix
/// windows of the batch segments, with exact analytic gradients. EMA
/// tables provide the bootstrap; the EMA policy is the target policy.
pub fn critic_loss(
    batch: &[Trajectory],
    agent: &AgentState,
    config: &TrainConfig,
    model: Option<&TransitionModel>,
) -> Result<(f64, CriticGrads)> {
    let (ns, na) = (agent.num_states, agent.num_actions);
    if config.method == CriticMethod::OffpolicyDae && model.is_none() {
        return Err(Error::Config("transition-corrected critic requires a transition model".into()));
    }
    let target_policy = agent.target_policy();
    let centered_adv = center_advantage(&agent.advantage, &target_policy);
    let q_ema = match config.method {
        CriticMethod::Tree => {
            let adv_ema = center_advantage(&agent.advantage_ema, &target_policy);
            Some(DMatrix::from_fn(ns, na, |s, a| agent.values_ema[s] + adv_ema[(s, a)]))
        }
        _ => None,
    };

    let gamma = config.gamma;
    let mut grads = CriticGrads {
        values: vec![0.0; ns],
        advantage: DMatrix::zeros(ns, na),
        luck: vec![0.0; ns * na * ns],
    };
    let mut loss = 0.0;
    let mut windows = 0usize;
    // First pass: count windows so gradients can be scaled in place.
    for segment in batch {
        windows += segment.windows(BackupLength::Steps(config.backup_length)).len();
    }
    if windows == 0 {
        return Err(Error::EmptyDataset);
    }
    let norm = 1.0 / windows as f64;

    for segment in batch {
        for w in segment.windows(BackupLength::Steps(config.backup_length)) {
            let start = w.steps[0];
            // Prediction and target per method.
            let mut pred = agent.values[start.state];
            let mut target = 0.0;
            match config.method {
                CriticMethod::Uncorrected | CriticMethod::Tree => {
                    pred += centered_adv[(start.state, start.action)];
                }
                CriticMethod::Dae | CriticMethod::OffpolicyDae => {
                    let mut scale = 1.0;
                    for (t, step) in w.steps.iter().enumerate() {
                        pred += scale * centered_adv[(step.state, step.action)];
                        if config.method == CriticMethod::OffpolicyDae {
                            pred += scale
                                * gamma
                                * agent.centered_luck(model.unwrap(), step.state, step.action, w.next_state(t));
                        }
                        scale *= gamma;
                    }
                }
            }
            match config.method {
                CriticMethod::Tree => {
                    target = tree_backup_target(&w, q_ema.as_ref().unwrap(), &target_policy, gamma);
                }
                _ => {
                    let mut scale = 1.0;
                    for step in w.steps {
                        target += scale * step.reward;
                        scale *= gamma;
                    }
                    if !w.end_terminal {
                        target += scale * agent.values_ema[w.end_state];
                    }
                }
            }

            let residual = pred - target;
            loss += norm * residual * residual;
            let g = 2.0 * norm * residual;

            grads.values[start.state] += g;
            match config.method {
                CriticMethod::Uncorrected | CriticMethod::Tree => {
                    add_advantage_grad(&mut grads.advantage, &target_policy, start.state, start.action, g);
                }
                CriticMethod::Dae | CriticMethod::OffpolicyDae => {
                    let mut scale = 1.0;
                    for (t, step) in w.steps.iter().enumerate() {
                        add_advantage_grad(&mut grads.advantage, &target_policy, step.state, step.action, g * scale);
                        if config.method == CriticMethod::OffpolicyDae {
                            add_luck_grad(
                                &mut grads.luck,
                                model.unwrap(),
                                ns,
                                na,
                                step.state,
                                step.action,
                                w.next_state(t),
                                g * scale * gamma,
                            );
                        }
                        scale *= gamma;
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Chain rule through the policy-centered advantage.
fn add_advantage_grad(grad: &mut DMatrix<f64>, policy: &PolicyTable, s: usize, a: usize, upstream: f64) {
    grad[(s, a)] += upstream;
    for a2 in 0..policy.num_actions() {
        grad[(s, a2)] -= upstream * policy.prob(s, a2);
    }
}

/// Chain rule through the model-centered nature advantage.
#[allow(clippy::too_many_arguments)]
fn add_luck_grad(
    grad: &mut [f64],
    model: &TransitionModel,
    ns: usize,
    na: usize,
    s: usize,
    a: usize,
    s2: usize,
    upstream: f64,
) {
    let Some(row) = model.row(s, a) else { return };
    grad[sas_index(na, ns, s, a, s2)] += upstream;
    for &(k, p) in row {
        grad[sas_index(na, ns, s, a, k)] -= upstream * p;
    }
}

/// Actor loss over the batch's state occurrences: the negative expected
/// normalized advantage under the current policy plus a KL penalty
/// toward the EMA policy. The advantage is a constant here (no gradient
/// flows through it); returns the exact gradient w.r.t. the logits.
pub fn actor_loss(
    batch_pairs: &[(usize, usize)],
    agent: &AgentState,
    config: &TrainConfig,
) -> Result<(f64, DMatrix<f64>)> {
    if batch_pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (ns, na) = (agent.num_states, agent.num_actions);
    let centered_adv = agent.centered_advantage();

    // Batch-variance normalization of the advantage, with a small guard.
    let n = batch_pairs.len() as f64;
    let mean: f64 = batch_pairs.iter().map(|&(s, a)| centered_adv[(s, a)]).sum::<f64>() / n;
    let var: f64 = batch_pairs
        .iter()
        .map(|&(s, a)| (centered_adv[(s, a)] - mean).powi(2))
        .sum::<f64>()
        / n;
    let denom = (var + 1e-8).sqrt();
    let normalized = DMatrix::from_fn(ns, na, |s, a| centered_adv[(s, a)] / denom);

    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(ns, na);
    let occ_norm = 1.0 / n;
    for &(s, _) in batch_pairs {
        let pi = softmax_row(&agent.logits, s);
        let pi_ema = softmax_row(&agent.logits_ema, s);
        let expected_adv: f64 = (0..na).map(|a| pi[a] * normalized[(s, a)]).sum();
        let kl: f64 = (0..na)
            .map(|a| {
                if pi[a] == 0.0 {
                    0.0
                } else {
                    pi[a] * (pi[a].ln() - pi_ema[a].ln())
                }
            })
            .sum();
        loss += occ_norm * (-expected_adv + config.beta_kl * kl);
        for a in 0..na {
            let adv_term = -pi[a] * (normalized[(s, a)] - expected_adv);
            let kl_term = config.beta_kl * pi[a] * ((pi[a].ln() - pi_ema[a].ln()) - kl);
            grad[(s, a)] += occ_norm * (adv_term + kl_term);
        }
    }
    Ok((loss, grad))
}

/// `ema <- tau * ema + (1 - tau) * current` for every EMA table.
pub fn ema_update(agent: &mut AgentState, tau: f64) {
    let blend_mat = |ema: &mut DMatrix<f64>, cur: &DMatrix<f64>| {
        ema.zip_apply(cur, |e, c| *e = tau * *e + (1.0 - tau) * c);
    };
    let blend_vec = |ema: &mut [f64], cur: &[f64]| {
        for (e, &c) in ema.iter_mut().zip(cur) {
            *e = tau * *e + (1.0 - tau) * c;
        }
    };
    let logits = agent.logits.clone();
    let advantage = agent.advantage.clone();
    blend_mat(&mut agent.logits_ema, &logits);
    blend_mat(&mut agent.advantage_ema, &advantage);
    let values = agent.values.clone();
    let luck = agent.luck.clone();
    blend_vec(&mut agent.values_ema, &values);
    blend_vec(&mut agent.luck_ema, &luck);
}

/// One point of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub mean_return: f64,
    pub stderr: f64,
}

/// Evaluation returns at increasing environment-step counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// CSV with a `step,mean_return,stderr` header.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("step,mean_return,stderr\n");
        for p in &self.points {
            writeln!(out, "{},{:.16e},{:.16e}", p.env_steps, p.mean_return, p.stderr).unwrap();
        }
        out
    }
}

struct ActorSlot {
    state: usize,
    segment: Vec<Step>,
    episode_len: usize,
    rng: ChaCha8Rng,
}

/// Runs the training loop: round-robin actors collect n-step segments
/// into the replay buffer; every `steps_per_update` steps the critic and
/// actor take one gradient step and the EMA tables blend toward the
/// current ones. Deterministic for a fixed config.
pub fn train(mdp: &FiniteMdp, config: &TrainConfig) -> Result<(AgentState, LearningCurve)> {
    config.validate()?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut agent = AgentState::new(ns, na, config.buffer_capacity);
    let oracle_model = match (config.method, config.model_kind) {
        (CriticMethod::OffpolicyDae, ModelKind::Oracle) => Some(TransitionModel::oracle(mdp)),
        _ => None,
    };

    let value_bound = 10.0
        * if config.gamma < 1.0 {
            mdp.max_abs_reward() / (1.0 - config.gamma)
        } else {
            mdp.max_abs_reward() * config.max_episode_len as f64
        };

    let mut actors: Vec<ActorSlot> = (0..config.num_actors)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, &[1, i as u64]));
            let state = sample_index(mdp.initial_dist(), &mut rng);
            ActorSlot { state, segment: Vec::new(), episode_len: 0, rng }
        })
        .collect();
    let mut update_rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, &[2]));
    let mut curve = LearningCurve::default();

    for step in 0..config.total_steps {
        let slot = &mut actors[step % config.num_actors];
        let action = sample_index(&softmax_row(&agent.logits, slot.state), &mut slot.rng);
        let reward = mdp.reward(slot.state, action);
        let next = sample_index(mdp.transition_row(slot.state, action), &mut slot.rng);
        slot.segment.push(Step { state: slot.state, action, reward });
        slot.episode_len += 1;
        agent.record_transition(slot.state, action, next);
        agent.env_steps += 1;

        let terminal = mdp.is_terminal(next);
        let episode_over = terminal || slot.episode_len >= config.max_episode_len;
        if terminal || episode_over || slot.segment.len() >= config.backup_length {
            agent.buffer.push(Trajectory {
                steps: std::mem::take(&mut slot.segment),
                final_state: next,
                truncated: !terminal,
            });
        }
        if episode_over {
            slot.state = sample_index(mdp.initial_dist(), &mut slot.rng);
            slot.episode_len = 0;
        } else {
            slot.state = next;
        }

        let done_steps = step + 1;
        if done_steps >= config.initial_steps
            && done_steps % config.steps_per_update == 0
            && agent.buffer.steps() > 0
        {
            let batch = agent.buffer.sample(&mut update_rng, config.batch_size);
            let empirical;
            let model: Option<&TransitionModel> = match (config.method, config.model_kind) {
                (CriticMethod::OffpolicyDae, ModelKind::Oracle) => oracle_model.as_ref(),
                (CriticMethod::OffpolicyDae, ModelKind::Empirical) => {
                    empirical = agent.empirical_model();
                    Some(&empirical)
                }
                _ => None,
            };
            let (_closs, cgrads) = critic_loss(&batch, &agent, config, model)?;
            let pairs: Vec<(usize, usize)> = batch
                .iter()
                .flat_map(|seg| seg.steps.iter().map(|st| (st.state, st.action)))
                .collect();
            let (_aloss, agrad) = actor_loss(&pairs, &agent, config)?;

            let lr = config.learning_rate * (1.0 - done_steps as f64 / config.total_steps as f64);
            for s in 0..ns {
                agent.values[s] -= lr * cgrads.values[s];
                for a in 0..na {
                    agent.advantage[(s, a)] -= lr * cgrads.advantage[(s, a)];
                    agent.logits[(s, a)] -= lr * agrad[(s, a)];
                }
            }
            if config.method == CriticMethod::OffpolicyDae {
                for (x, g) in agent.luck.iter_mut().zip(&cgrads.luck) {
                    *x -= lr * g;
                }
            }
            let vmax = agent.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if vmax > value_bound {
                return Err(Error::Divergence(format!(
                    "|V| reached {vmax:.3e} (bound {value_bound:.3e}) at step {done_steps} \
                     with method {}, seed {}",
                    config.method, config.seed
                )));
            }
            ema_update(&mut agent, config.tau);
        }

        if done_steps % config.eval_every == 0 {
            let point = evaluate(mdp, &agent, config, done_steps as u64);
            curve.points.push(point);
        }
    }
    Ok((agent, curve))
}

/// Mean undiscounted return of greedy-policy episodes.
fn evaluate(mdp: &FiniteMdp, agent: &AgentState, config: &TrainConfig, at_step: u64) -> CurvePoint {
    let greedy = agent.greedy_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, &[3, at_step]));
    let mut returns = Vec::with_capacity(config.eval_episodes);
    for _ in 0..config.eval_episodes {
        let mut state = sample_index(mdp.initial_dist(), &mut rng);
        let mut total = 0.0;
        for _ in 0..config.max_episode_len {
            if mdp.is_terminal(state) {
                break;
            }
            let action = greedy[state];
            total += mdp.reward(state, action);
            state = sample_index(mdp.transition_row(state, action), &mut rng);
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    CurvePoint {
        env_steps: at_step,
        mean_return: mean,
        stderr: (var / n).sqrt(),
    }
}

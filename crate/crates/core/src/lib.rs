//! Tabular reinforcement-learning workbench: finite MDPs with exact
//! dynamic-programming oracles, the skill/luck return decomposition, the
//! direct advantage estimator family (on- and off-policy), verifiers for
//! the underlying identities, and a small off-policy actor-critic.

pub mod actor_critic;
pub mod analysis;
pub mod builders;
pub mod features;
pub mod fit;
pub mod dp;
pub mod error;
pub mod mdp;
pub mod seeds;
pub mod targets;
pub mod trajectory;
pub mod transition_model;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, PolicyTable};
pub use trajectory::{BackupLength, Dataset, Step, Trajectory, Window};

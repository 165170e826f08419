//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error("mdp is not episodic: {0}")]
    NonEpisodic(String),
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("fit error: empty dataset")]
    EmptyDataset,
    #[error("fit error: truncated trajectory with an episode-length backup requires a bootstrap table")]
    TruncatedRequiresBootstrap,
    #[error("fit error: dataset transition ({state},{action})->{next} is outside the model support")]
    UnsupportedTransition {
        state: usize,
        action: usize,
        next: usize,
    },
    #[error("read off the transition support: ({state},{action})->{next}")]
    OffSupport {
        state: usize,
        action: usize,
        next: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: non-finite value produced")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("weights are frozen; refusing to modify `{0}`")]
    Frozen(String),

    #[error("frozen weight hash changed: {before:016x} -> {after:016x}")]
    HashMismatch { before: u64, after: u64 },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

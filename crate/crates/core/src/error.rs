use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no units in arm {arm}")]
    EmptyArm { arm: &'static str },

    #[error("treatment is constant ({0} units, all in one arm)")]
    SingleArm(usize),

    #[error("too few rows: need at least {need}, got {got}")]
    TooFewRows { need: usize, got: usize },

    #[error("stratum {stratum}: {reason}")]
    Stratum { stratum: String, reason: String },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("collinear basis: {0}")]
    Collinear(String),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("unknown method `{name}`; available: {available}")]
    UnknownMethod { name: String, available: String },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

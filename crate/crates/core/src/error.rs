use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular linear system while {0}")]
    Singular(&'static str),

    #[error("value iteration did not reach tol={tol:e} within {cap} sweeps")]
    NoConvergence { tol: f64, cap: usize },

    #[error("reducible chain: state {0} cannot reach every other state")]
    ReducibleChain(usize),

    #[error("periodic chain (period {0})")]
    PeriodicChain(usize),

    #[error("mixing check failed: {0}")]
    NotMixing(String),

    #[error("VBE needs interior policy values at visited states (state {state}, action {action}, prob {prob:e})")]
    NonInteriorPolicy { state: usize, action: usize, prob: f64 },

    #[error("divergence requires interior reference")]
    NonInteriorReference,

    #[error("bracket violated: phi(l)={lo:e}, phi(h)={hi:e}")]
    BracketViolated { lo: f64, hi: f64 },

    #[error("all-zero unnormalized mass in proximal update")]
    ZeroMass,

    #[error("trajectory streams must be independent (both use stream {0})")]
    SharedStream(u64),

    #[error("trajectory too short: need {need} steps, have {have}")]
    ShortTrajectory { need: usize, have: usize },

    #[error("unknown bound `{0}`")]
    UnknownBound(String),

    #[error("missing parameter `{0}`")]
    MissingParam(&'static str),

    #[error("iteration {iter}: {source}")]
    AtIteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// `g - p*tau <= 0` (or `c <= p` in relaxed form): the queue grows without bound.
    #[error("unstable shaper: service margin {margin} must be positive")]
    Unstable { margin: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("{name} = {value} is outside its domain ({expected})")]
    Domain {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("waiting time is not differentiable on the kink c = 2p (p = {p}, c = {c})")]
    Kink { p: f64, c: f64 },

    #[error("finite-difference stencil around (p = {p}, c = {c}) with step {step} straddles the kink c = 2p")]
    Straddle { p: f64, c: f64, step: f64 },

    #[error("allocation problem is infeasible: {0}")]
    Infeasible(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, expected: &'static str) -> Self {
        Error::Domain {
            name,
            value,
            expected,
        }
    }
}

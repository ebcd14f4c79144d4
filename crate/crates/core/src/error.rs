use thiserror::Error;

/// Errors raised by the model, discretization, solver and analysis layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid exponents: {0}")]
    InvalidExponents(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("infeasible analysis constants: {0}")]
    InfeasibleConstants(String),

    #[error("grid too coarse: M = {0}, at least 16 intervals are required")]
    TooCoarse(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty window [{lo}, {hi}]")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("radius {0} outside [0, 1]")]
    OutOfDomain(f64),

    #[error("spike not resolved: {inside} nodes in [0, delta], at least 8 required")]
    UnresolvedSpike { inside: usize },

    #[error("non-finite field value {value} at node {node}")]
    NonFiniteField { node: usize, value: f64 },

    #[error("invalid initial data: {0}")]
    InvalidInitialData(String),

    #[error("invalid step control: {0}")]
    InvalidControl(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fitted slope {0} is non-negative, the data does not decay towards blow-up")]
    NonDecaying(f64),

    #[error("fit window holds {0} nodes, at least 8 required")]
    WindowTooNarrow(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::fmt;

use thiserror::Error;

/// Identifies a grid cell in error messages and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Selection { s: f64 },
    Outcome { y: f64 },
    Joint { s: f64, y: f64 },
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Selection { s } => write!(f, "s={s}"),
            Cell::Outcome { y } => write!(f, "y={y}"),
            Cell::Joint { s, y } => write!(f, "(s={s}, y={y})"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CdrError {
    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("correlation |rho| = 1 is degenerate for this quantity")]
    DegenerateCorrelation,

    #[error("probability {value} outside feasible range [{lower}, {upper}]")]
    InfeasibleProbability { value: f64, lower: f64, upper: f64 },

    #[error("marginal probability {0} is on the boundary of [0, 1]")]
    DegenerateMarginal(f64),

    #[error("instrument is irrelevant: Pr(S > s0 | Z = 0) = Pr(S > s0 | Z = 1) = {0}")]
    WeakInstrument(f64),

    #[error("no convergence after {iterations} iterations, residuals {residuals:?}")]
    Nonconvergence { iterations: usize, residuals: Vec<f64> },

    #[error("indicator is perfectly separated at {0} (all observations on one side)")]
    Separation(Cell),

    #[error("no selected observations (all D = 0)")]
    EmptySelection,

    #[error("objective is not finite at the starting point")]
    BadStart,

    #[error("singular Hessian block at {0}")]
    SingularHessian(Cell),

    #[error("variance of the contrast is zero at {0}")]
    DegenerateCell(Cell),

    #[error("evaluation point {0} is not on the fitted grid")]
    OffGrid(f64),

    #[error("empty stratum ({lo}, {hi}]: selection probability {mass}")]
    EmptyStratum { lo: f64, hi: f64, mass: f64 },

    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step {step} failed at {cell}: {source}")]
    StepFailed {
        step: u8,
        cell: Cell,
        #[source]
        source: Box<CdrError>,
    },
}

pub type Result<T> = std::result::Result<T, CdrError>;

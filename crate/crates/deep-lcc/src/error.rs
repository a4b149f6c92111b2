//! Crate-wide error type.

use std::fmt;

/// Errors raised by configuration validation, simulation, data handling and
/// the optimization layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violates an invariant (message explains which).
    InvalidConfig(String),
    /// No finite equilibrium spacing exists for the requested velocity.
    NoEquilibrium { v_star: f64, v_max: f64 },
    /// Two vehicles came into contact during simulation.
    Collision {
        /// Simulation time of the event in seconds.
        time: f64,
        /// Index of the vehicle whose front spacing closed to zero.
        vehicle: usize,
    },
    /// A dataset or matrix does not have the shape an operation requires.
    DimensionMismatch(String),
    /// Pre-collected data is too short for the requested horizons.
    InsufficientData { required: usize, actual: usize },
    /// The QP solver failed to produce a usable control input.
    SolverFailure {
        /// Control step at which the solve failed.
        time: f64,
        reason: String,
    },
    /// The observability stack is rank deficient; state reconstruction is
    /// not well posed.
    UnobservableModel(String),
    /// File I/O or parse failure, wrapped with the offending path.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NoEquilibrium { v_star, v_max } => write!(
                f,
                "no finite equilibrium spacing for v* = {v_star} (must satisfy 0 <= v* < v_max = {v_max})"
            ),
            Error::Collision { time, vehicle } => {
                write!(f, "collision: spacing of vehicle {vehicle} reached zero at t = {time:.3} s")
            }
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::InsufficientData { required, actual } => {
                write!(f, "insufficient data: need at least {required} samples, got {actual}")
            }
            Error::SolverFailure { time, reason } => {
                write!(f, "QP solver failure at t = {time:.3} s: {reason}")
            }
            Error::UnobservableModel(msg) => write!(f, "unobservable model: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

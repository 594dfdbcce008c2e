use thiserror::Error;

use crate::dsl::ParseError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("negative population {value} for species index {dim}")]
    NegativeState { dim: usize, value: i64 },

    #[error("state has {got} components, network has {expected} species")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("macro-states {first} and {second} overlap")]
    Overlap { first: usize, second: usize },

    #[error("integration failed at t = {t}: step size {h:e} underflowed (problem too stiff for the chosen method?)")]
    StepUnderflow { t: f64, h: f64 },

    #[error("integration failed at t = {t}: step limit of {limit} exceeded")]
    TooManySteps { t: f64, limit: usize },

    #[error("terminal event numerically unreachable: normalizer {normalizer:e}, sink mass at T {sink_mass:e}")]
    Unreachable { normalizer: f64, sink_mass: f64 },

    #[error(
        "every macro-state was truncated (largest bridging probability {max_gamma:e}); \
         enlarge the bounds or lower delta"
    )]
    AllTruncated { max_gamma: f64 },

    #[error("observation incompatible with prior truncation (zero posterior mass)")]
    IncompatibleObservation,

    #[error("{0}")]
    Query(String),
}

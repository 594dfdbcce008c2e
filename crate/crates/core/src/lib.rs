//! Bridging distributions of population Markov jump processes on lumped,
//! iteratively refined state spaces.
//!
//! The pipeline is: a [`ReactionNetwork`] and query parsed from a
//! [`ModelDocument`]; a [`LumpedSpace`] of integer boxes; a [`SparseGenerator`]
//! over that space with a sink for truncated mass; forward and backward
//! transient solves; and the refinement loop in [`bridge`] that keeps only
//! the boxes carrying bridging probability.

pub mod bayes;
pub mod bridge;
pub mod dsl;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod model;
pub mod rates;
pub mod solver;

pub use bridge::{occupation_time, rare_event_bound, refine, BridgingSolution, Problem, RefinementTrace};
pub use dsl::{parse_model, render_model, ModelDocument};
pub use error::{Error, Result};
pub use generator::SparseGenerator;
pub use geometry::{initial_grid, LumpedSpace, MacroState};
pub use model::{PropensitySpec, Reaction, ReactionNetwork};
pub use solver::{Method, SolverOptions, TimeGrid};

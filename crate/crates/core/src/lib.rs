//! Transition-aware emotional support response generation.

pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod training;
pub mod transition_graph;

pub use error::{Error, Result};

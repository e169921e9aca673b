pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod proposal_stage;
pub mod prototypes;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;

pub use error::{Error, Result};

//! Aging dictionaries: coupled and bi-level dictionary learning over paired
//! samples from neighboring age groups, and age-progression synthesis by
//! chaining dictionary transfers with a personalized layer.

pub mod bilevel;
pub mod cli;
pub mod coupled;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pca;
pub mod sparse;
pub mod synthesis;
pub mod train;

pub use error::{Error, Result};
pub use model::{AgingDictionary, CodedPair, HyperParams, ModelBundle, Projection};

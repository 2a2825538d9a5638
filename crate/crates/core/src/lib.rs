//! Context-aware pedestrian crossing trajectory prediction: data formats,
//! windowing, Aux-LSTM training and evaluation, experiment orchestration,
//! a synthetic crossing generator, mid-block crossing extraction from scene
//! logs, and Shapley attribution of contextual variables.

pub mod error;
pub mod explain;
pub mod extractor;
pub mod harness;
pub mod model;
pub mod par;
pub mod schema;
pub mod seed;
pub mod synthgen;
pub mod windowing;

pub use error::{CoreError, Result};

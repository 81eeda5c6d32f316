//! Request-only (ROO) training data at desk scale.

pub mod batcher;
pub mod cost;
pub mod harness;
pub mod joiner;
pub mod model;
pub mod schema;
pub mod store;
pub mod tensor;

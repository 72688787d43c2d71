//! Predictive modeling over relational datasets.
//!
//! The pipeline goes: load a multi-table dataset ([`store`]), describe the
//! prediction task and the relevant data slice ([`profile`]), build a typed
//! graph over primary/foreign keys ([`graph`]), then either deploy a plain
//! tabular model or augment it with relation-aware context ([`model`],
//! [`base`], [`dispatch`]), train ([`train`]) and explain the result
//! ([`report`]). Everything numeric runs on the small f64 autodiff engine in
//! [`tensor`].

pub mod agent;
pub mod base;
pub mod dispatch;
pub mod graph;
pub mod model;
pub mod profile;
pub mod report;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, NodeId, Tensor};

//! Pipeline-parallel inference orchestration across memory-constrained workers.
//!
//! A staged model is split into ordered partitions. A foreman materialises the
//! per-input task graph, broadcasts the first stage eagerly, loads downstream
//! stages just in time, and dispatches tasks only to workers that have confirmed
//! the required partition resident. Workers hold at most one partition in memory.

pub mod aggregate;
pub mod canonical;
pub mod foreman;
pub mod graph;
pub mod mcdm;
pub mod model;
pub mod net;
pub mod protocol;
pub mod scheduler;
pub mod sdk;
pub mod sim;
pub mod transport;
pub mod worker;

pub type CriteriaMatrixF64 = mcdm::CriteriaMatrix<f64>;
pub type CriteriaMatrixF32 = mcdm::CriteriaMatrix<f32>;
pub type PredictionF64 = aggregate::Prediction<f64>;
pub type PredictionF32 = aggregate::Prediction<f32>;

//! Melanocytic-lesion triage: slide tessellation, feature bags, a
//! bag-level transformer with hand-written gradients, its training loop,
//! evaluation metrics and the case-assignment simulation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Models are
//! stored and trained in `f32`; `f64` is used for verification.

pub mod aggregator;
pub mod dataset;
pub mod evaluation;
pub mod matrix;
pub mod rng;
pub mod scalar;
pub mod tessellation;
pub mod training;
pub mod triage_sim;

pub use scalar::Scalar;

pub type Bag32 = dataset::FeatureBag<f32>;
pub type Bag64 = dataset::FeatureBag<f64>;
pub type Params32 = aggregator::AggregatorParams<f32>;
pub type Params64 = aggregator::AggregatorParams<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Matrix64 = matrix::Matrix<f64>;

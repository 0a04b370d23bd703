//! AU-graph guided micro-expression recognition at desk scale.
//!
//! The crate bundles everything needed to train and score the model on
//! synthetic optical-flow data: the AU relation graph, a small f64 autodiff
//! engine, the network itself, the balanced detection loss, the augmentation
//! plan, recognition metrics, dataset tooling, and the ADAM training loop.

pub mod augment;
pub mod augraph;
pub mod datahub;
pub mod diffcore;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

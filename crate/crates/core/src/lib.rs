//! Rationale extraction with a selector, a masked predictor and a
//! full-input guider whose features are calibrated adversarially.
//!
//! The crate carries its own small tensor tape ([`graph`]) and optimizer so
//! that every loss term can be differentiated end to end and verified with
//! finite differences ([`gradcheck`]).

pub mod adam;
pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod guider;
pub mod lm;
pub mod params;
pub mod pipeline;
pub mod predictor;
pub mod selector;
pub mod tensor;
pub mod training;

pub use adam::{AdamConfig, AdamState};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{GradMap, ParamGroup, ParamStore};
pub use tensor::Tensor;

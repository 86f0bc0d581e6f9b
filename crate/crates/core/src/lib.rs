//! Generation-enhanced alignment for text-to-image person retrieval.
//!
//! Feature storage, a rectified-flow sampler, token-level encoders, text
//! token mixing, the triplet alignment loss, generated-image fusion,
//! retrieval metrics and a trainer, all in `f64` on the CPU.

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod feature_store;
pub mod flow_sampler;
pub mod fixture;
pub mod gif;
mod hashing;
pub mod layers;
pub mod model;
pub mod par;
pub mod params;
pub mod projection;
pub mod reports;
pub mod retrieval;
pub mod tal;
pub mod tensor;
pub mod tgte;
pub mod trainer;

pub use error::{GeaError, Result};
pub use par::Execution;

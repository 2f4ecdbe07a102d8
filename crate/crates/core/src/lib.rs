//! Prototype rectification for few-shot classification with a learned
//! gradient flow.

pub mod analysis;
pub mod episodes;
pub mod error;
pub mod gradnet;
pub mod metatrain;
pub mod numerics;
pub mod odeflow;
pub mod protoclassify;

pub use episodes::{Episode, FeatureDataset, Mode};
pub use error::{Error, Result};
pub use gradnet::{GradNetConfig, GradNetParams};
pub use numerics::{Matrix, Tape, Tensor};
pub use odeflow::SolveConfig;
pub use protoclassify::PrototypeState;

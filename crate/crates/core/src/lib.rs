//! Two-world deep-learning runtime.
//!
//! A small layered NN engine whose networks can be split at a boundary
//! layer: a prefix runs in the untrusted rich world while the suffix runs
//! behind a message channel in a simulated trusted world with a hard
//! secure-memory budget. Sensitive layers are sealed at rest with
//! authenticated encryption, predictions leave the trusted side only
//! through sanitization policies, and a white-box membership-inference
//! harness measures what the split actually protects.

mod bytes;

pub mod cfg;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod mia;
pub mod net;
pub mod privacy;
pub mod rng;
pub mod seal;
pub mod tensor;
pub mod weights;
pub mod worlds;

pub use error::{Error, ErrorCategory, Result};
pub use layer::{Activation, Layer, LayerGrads, LayerKind, Mode};
pub use net::Network;
pub use tensor::{Shape, Tensor};

//! Desk-scale lab for comparing backpropagation with direct feedback
//! alignment on small causal decoders.
//!
//! The crate covers the numeric substrate ([`tensor`]), the decoder and its
//! exact backward ([`model`]), the four credit-assignment strategies
//! ([`feedback`]), gradient diagnostics ([`diagnostics`]), FLOP accounting
//! ([`compute`]), frontier fitting ([`frontier`]) and the experiment driver
//! ([`harness`]).

pub mod compute;
pub mod diagnostics;
pub mod error;
pub mod feedback;
pub mod frontier;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use feedback::{FeedbackMatrix, FeedbackMode};
pub use model::{Model, ModelConfig};
pub use rng::RngState;
pub use tensor::Tensor;

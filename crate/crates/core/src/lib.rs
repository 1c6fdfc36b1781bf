//! Streaming dual-memory recurrent engine.
//!
//! The engine keeps two memories per stream:
//!
//! * an implicit memory ([`fast_weight`]), a per-head SwiGLU MLP whose weights are
//!   rewritten every frame by a test-time-training step that aligns a predicted pose
//!   prior with the decoder's posterior pose token;
//! * an explicit memory ([`state`]), a fixed grid of state tokens blended with the
//!   decoder's candidate state through a channel-wise gate, optionally rescaled by a
//!   plug-in per-token gate.
//!
//! [`engine`] closes the loop with a surrogate decoder and toy prediction heads,
//! [`objectives`] holds the training losses, [`metrics`] the evaluation suite and
//! [`harness`] the synthetic streams, runner and CLI.

pub mod decoder;
pub mod engine;
pub mod error;
pub mod fast_weight;
pub mod frame;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod state;

pub use error::{Error, Result};
pub use fast_weight::{FastWeightConfig, FastWeightGradients, FastWeights, SlowParams};
pub use frame::FramePacket;
pub use state::{GateConfig, GateParams, GateStrategy, StateTokens, TokenGate};

//! Indoor positioning workbench.
//!
//! * [`channel_sim`] synthesizes indoor-factory CIR tensors from a stochastic
//!   cluster model whose delay/angle spread distributions can be re-fitted.
//! * [`channel_stats`] measures delay and angle spread from CIRs and fits the
//!   lognormal population parameters that update the simulator.
//! * [`dataset`] holds samples, splits them and turns CIRs into network inputs.
//! * [`neural_net`] is a small dense network with a position head and a bias
//!   head, trained with Adam under a cosine learning-rate schedule.
//! * [`sslb`] implements reference pairing, the biased teacher, KDE confidence
//!   weighting and the weighted student, plus the SL/SLR/SSLR baselines.
//! * [`bench`] contains metrics and the experiment drivers used by the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod channel_sim;
pub mod channel_stats;
pub mod dataset;
pub mod error;
pub mod neural_net;
pub mod rng;
pub mod sslb;

pub use error::{Error, Result};

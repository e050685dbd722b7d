//! ReFocus: spectral time-series forecasting with verifiable frequency-domain claims.
//!
//! The library has two faces that share one numeric core:
//!
//! * A trainable forecasting model — reversible instance normalization around a
//!   mid-frequency energy rebalancing layer ([`ameo`]), frequency-domain variate
//!   embeddings, a stack of energy-based key-frequency picking blocks ([`ekpb`]),
//!   and a frequency-domain head — optimized with Adam and an optional
//!   frequency mix-up augmentation ([`training`]).
//! * Numerical verifiers for the closed-form spectral identities the design
//!   rests on: the instance-normalization energy identity ([`revin`]), the
//!   rebalancing layer's gain curve `|1 − βG(f)|²` ([`ameo`]), and the
//!   time/frequency equivalence of the mix-up augmentation ([`training`]).
//!
//! Everything is `f64`; verifier tolerances sit near machine epsilon and are
//! pinned in the acceptance suite. All randomness flows through explicitly
//! seeded [`rng`] streams, so every entry point is reproducible bit-for-bit.

pub mod ameo;
pub mod baselines;
pub mod data;
pub mod ekpb;
pub mod error;
pub mod fft;
pub mod model;
pub mod par;
pub mod revin;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};

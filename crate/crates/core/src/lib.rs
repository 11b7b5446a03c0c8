//! Joint generative and discriminative modeling of quasi-periodic breathing
//! signals with variational, adversarial and semi-supervised adversarial
//! autoencoders.

pub mod bundle;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod models;
pub mod objectives;
pub mod preprocess;
pub mod reconstruct;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic generator used everywhere randomness is needed.
pub type Prng = rand_chacha::ChaCha8Rng;

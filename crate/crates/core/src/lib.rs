//! Token-importance guided direct preference optimization on a micro causal
//! language model.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over `f64` matrices
//! - [`microlm`]: the policy/reference transformer and its checkpoint format
//! - [`attribution`]: gradient-attribution token scores, Gaussian position
//!   prior and their convex mix
//! - [`losses`]: weighted token-level DPO, the anchor triplet loss and the
//!   ablation variants
//! - [`datagen`]: synthetic preference corpora with planted critical tokens
//! - [`trainer`]: the training loop, evaluation and paired runs
//! - [`verify`]: executable checks of the variance, loss-bound, gradient and
//!   analysis claims

pub mod attribution;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod microlm;
pub mod sequence;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use sequence::{TokenId, TokenSequence};

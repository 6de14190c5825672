//! Localized visible adversarial noise patches against a small image classifier.
//!
//! The crate is organized around a minimal differentiable CNN ([`net`]) that
//! exposes pre-softmax logits and input-pixel gradients. On top of it sit:
//!
//! - [`attack`]: single-image, single-location patch generation by gradient
//!   ascent on a decoupled logit objective (target minus reference class),
//!   in either the unrestricted network domain or the clipped image domain.
//! - [`transfer`]: training one patch that works across images and locations
//!   by sampling a random (image, location) pair per step.
//! - [`eval`]: location sweeps, cross-image transfer rates with nested
//!   success tiers, and source/target class-dependence matrices.
//! - [`saliency`]: gradient-fix maps (how much per-pixel update it takes to
//!   undo a misclassification) and windowed MAX/SUM overlap statistics.
//!
//! File formats (model, patch, PPM/PGM images) live in [`net::model_io`],
//! [`attack::patch_io`], and [`pnm`]. All randomness is drawn from named
//! substreams of a single seed ([`rng`]), so runs are bit-reproducible.

pub mod attack;
pub mod error;
pub mod eval;
pub mod net;
pub mod pnm;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Image, Scalar, Tensor};

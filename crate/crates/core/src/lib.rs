//! Desk-scale laboratory for gradient-inversion attacks and defenses in
//! federated learning.
//!
//! The crate simulates FL rounds with small classifiers, trains a small
//! conditional generator, and runs reconstruction attacks against the
//! gradients a client shares: direct pixel optimization, latent-space
//! search, and the staged intermediate-feature search with l1-ball
//! projection and min-loss output selection. Defense mechanisms (noise,
//! clipping, sparsification, Soteria-style masking) and the attacker-side
//! transformation inference that adapts to them are included, along with
//! PSNR/SSIM/MSE evaluation and report emission.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod defenses;
pub mod error;
pub mod flsim;
pub mod gradmatch;
pub mod labels;
pub mod models;
pub mod rng;
pub mod tensor;

pub mod attacks;

pub use error::{Error, Result};
pub use tensor::TensorF;

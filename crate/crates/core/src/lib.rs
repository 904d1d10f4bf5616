//! Parsing-map guided face super-resolution at desk scale.
//!
//! The crate builds everything from first principles: a reverse-mode
//! autodiff tape over dense 4-D tensors ([`tape`]), the composite network
//! blocks ([`blocks`]), the two networks — a parsing-map estimator and a
//! fish-shaped multi-scale super-resolver ([`networks`]) — ADAM training
//! ([`optim`], [`train`]), a synthetic face dataset with analytic parsing
//! masks ([`data`]), bit-exact file formats ([`fio`]), and Y-channel
//! PSNR/SSIM metrics ([`metrics`]).

pub mod blocks;
pub mod data;
pub mod error;
pub mod fio;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use tensor::{Scalar, Shape, Tensor};

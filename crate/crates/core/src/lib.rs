//! Paired mask/image synthesis with two mutually guiding diffusion models.
//!
//! The crate is organized around a small tensor engine and the closed-form
//! diffusion algebra on top of it:
//!
//! * [`tensor`] — dense N-D arrays with reverse-mode differentiation, 2-D
//!   convolution, group normalization, and an Adam optimizer.
//! * [`rng`] — the counter-based seeded generator every stochastic component
//!   draws from.
//! * [`schedule`] — noise schedules, the closed-form forward (noising)
//!   process, and strided sampling-step sequences.
//! * [`denoiser`] — the time-conditioned two-channel U-Net noise predictor.
//! * [`sampler`] — clean-image prediction, the deterministic/stochastic
//!   reverse step, and learning-free oracle denoisers.
//! * [`paired`] — training loops for the guider and conditional models and
//!   the mutually guided paired sampling loop.
//! * [`data`] — synthetic paired mask/image dataset generation and PGM I/O.
//! * [`eval`] — pair consistency, a Fréchet feature distance, and mask
//!   diversity metrics.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
mod imgutil;
pub mod paired;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};

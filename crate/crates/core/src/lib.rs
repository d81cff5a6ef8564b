//! Flow-matching generative channel estimation for MIMO links.
//!
//! The crate covers the whole pipeline:
//!
//! - [`tensor`]: complex matrices, real tensors and a reproducible RNG.
//! - [`channel`]: a clustered geometric channel model and the `FMCHEST1`
//!   dataset format.
//! - [`pilot`]: orthogonal QPSK pilots, the measurement model `Y = HP + E`
//!   and the least-squares initial estimate.
//! - [`nn`]: a compact UNet velocity network with hand-written backward
//!   passes and AdamW.
//! - [`flow`]: conditional flow-matching paths, the CFM loss and training.
//! - [`train`]: the regression loop, validation and training logs shared by
//!   both generative models.
//! - [`sampler`]: Euler integration of the learned field starting at the LS
//!   estimate.
//! - [`score`]: a denoising score-matching baseline sampled with annealed
//!   Langevin dynamics.
//! - [`bench`]: NMSE, sweeps, timing and CSV reports.

pub mod bench;
pub mod channel;
pub mod error;
pub mod flow;
pub mod nn;
pub mod pilot;
pub mod sampler;
pub mod score;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComplexMatrix, RealTensor, Rng};

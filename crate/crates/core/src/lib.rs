//! Variable-length flow-matching diffusion transformer.
//!
//! The crate covers the whole training and inference pipeline for
//! sequences of fixed-width latent frames:
//!
//! * [`latent`]: sequences, padded batches, length allocation, silence padding
//! * [`schedules`]: timestep distributions and the inference grid
//! * [`dit`]: the diffusion transformer
//! * [`flow`]: flow-matching pre-training with OT coupling and EMA
//! * [`distill`]: teacher trajectories and one-step student warmup
//! * [`adversarial`]: discriminator, relativistic and contrastive losses
//! * [`sampler`]: ping-pong sampling, inpainting, Euler baseline
//! * [`trb`]: patching, resampling blocks and the soft-norm bottleneck
//! * [`eval`]: Fréchet distance, alignment, synthetic data
//!
//! Everything is `no_std` with `alloc`; the `std` feature only forwards to
//! dependencies. Numerics run on a small tape-based autodiff engine
//! ([`graph`]) over dense row-major matrices ([`tensor`]).

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adversarial;
pub mod distill;
pub mod dit;
pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod latent;
pub mod linalg;
pub mod oracle;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod tensor;
pub mod trb;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

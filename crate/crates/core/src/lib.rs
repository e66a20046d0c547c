//! Data-free post-training quantization for CLIP-style dual encoders.
//!
//! The crate is layered bottom-up:
//!
//! * [`autograd`], [`tensor`], [`optim`]: a small deterministic reverse-mode
//!   autodiff engine and Adam.
//! * [`quant`]: uniform affine quantizers, OMSE initialization and
//!   straight-through fake quantization.
//! * [`clip`]: a procedural shapes-and-captions dataset and toy CNN / ViT
//!   image encoders paired with a transformer text encoder.
//! * [`synth`]: calibration-image synthesis from Gaussian noise, with
//!   prompt-guided contrastive objectives and the BNS / PSE baselines.
//! * [`calib`]: block- and layer-wise reconstruction of quantizer parameters.
//! * [`diag`]: patch-similarity, cluster and compression diagnostics.

pub mod autograd;
pub mod calib;
pub mod checkpoint;
pub mod clip;
pub mod diag;
pub mod error;
pub mod imageio;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use autograd::{Gradients, SpatialMap, Tape, Var};
pub use error::{Error, Result};
pub use optim::Adam;
pub use rng::{Prng, SeedStream};
pub use tensor::Tensor;

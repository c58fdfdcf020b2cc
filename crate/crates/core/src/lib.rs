//! Frequency-aware selective state-space image restoration.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, convolution and friends, and a reverse-mode tape.
//! * [`wavelet`]: orthonormal Haar analysis/synthesis.
//! * [`afsm`]: per-sub-band scan orders turning 2D bands into sequences.
//! * [`ssm`]: discretization, the selective scan and its recurrence oracle.
//! * [`blocks`]: the dual-branch extractor, prior-guided attention, the
//!   high-frequency U-Net and their composition.
//! * [`model`]: the full restoration network plus checkpoints.
//! * [`loss`], [`datasynth`], [`trainer`]: objective, data and optimisation.

pub mod afsm;
pub mod blocks;
pub mod datasynth;
pub mod error;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod params;
pub mod ssm;
pub mod timing;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Precision};
pub use numerics::{Graph, Real, Tensor, Var};
pub use wavelet::SubBands;

//! Training, distillation, evaluation and int8-quantization toolkit for a
//! compact three-level anchor-free detector, self-contained on CPU.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`nn`] — minimal f64 NCHW tensors and the layer zoo
//!   (convolution, batch norm, ReLU6, nearest upsample) with hand-written
//!   backward passes.
//! * [`geometry`] — boxes and the IoU / GIoU / DIoU / CIoU overlap losses
//!   with analytic gradients.
//! * [`losses`] — classification losses (BCE, focal, gradient-weighted BCE)
//!   and the combined detection loss.
//! * [`detector`] — the student (depthwise-separable backbone) and teacher
//!   (residual backbone) networks, parameter/FLOP audits, checkpoints.
//! * [`targets`] — anchor-free target assignment, box decoding, NMS and
//!   end-to-end inference.
//! * [`distill`] — feature-imitation distillation: foreground/background
//!   masks, attention, focal and global distillation terms, GcBlock.
//! * [`eval`] — greedy matching, precision/recall/F1/specificity, average
//!   precision, confusion matrices, report serialization.
//! * [`quant`] — post-training int8 simulation: calibration, fake
//!   quantization, quantized inference and the deployment size audit.
//! * [`synthcorpus`] — deterministic synthetic two-class detection corpus.
//! * [`trainer`] — SGD training loops (plain and distilled) and the
//!   loss-ablation grid.

pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod synthcorpus;
pub mod targets;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::Error;

/// Number of object classes the detector distinguishes.
pub const NUM_CLASSES: usize = 2;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

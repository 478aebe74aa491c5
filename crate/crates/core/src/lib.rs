//! Optic disc segmentation with a frozen vision-transformer encoder and a
//! trainable mask-transformer head.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and tape-based reverse-mode gradients
//! * [`nn`]: transformer blocks shared by encoder and head
//! * [`container`]: the portable weight file format
//! * [`encoder`]: patch embedding and the frozen transformer trunk
//! * [`decoder`]: class-token mask transformer, probability maps, masks
//! * [`objectives`]: soft Dice, binary cross-entropy and their sum
//! * [`metrics`]: Dice, 95% Hausdorff distance, average surface distance
//! * [`data`]: image I/O, resizing, augmentation, manifests, post-processing
//! * [`train`]: Adam, the training loop, grokking detection, experiments

pub mod container;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use tensor::{Parameter, Tape, Tensor};

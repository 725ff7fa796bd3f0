//! Corner-heatmap localization of structured documents.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors and a tape-based reverse-mode autodiff with
//!   the convolution, normalization and optimizer kernels the model needs.
//! - [`model`]: the U-Net style network with a movable encoder/decoder
//!   split, freezing, weight transfer and checkpoints.
//! - [`geometry`]: quadrangles, polygon IoU, heatmap encode/decode,
//!   homographies and rectification.
//! - [`synth`]: procedural documents in five classes, scene composition,
//!   augmentation and the on-disk dataset format.
//! - [`training`]: the training loop, metrics, both experiment protocols
//!   and their reports.
//! - [`cli`]: the run configuration file and the commands of the `sdlnet`
//!   binary.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod cli;
pub mod geometry;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

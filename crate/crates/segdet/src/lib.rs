//! Segmentation-by-detection: a two-stage cascade for volumetric images.
//!
//! A 2D region-proposal detector scans each slice of a volume; its box
//! proposals are stacked into a binary 3D attention volume that is fed,
//! together with the image volume, into a 3D U-Net segmenter. Everything
//! runs on the CPU on top of a small reverse-mode autodiff tape.
//!
//! The `examples/` directory holds one runnable example per capability;
//! the `segdet` binary wires the same library calls behind `gen-data`,
//! `train-rpn`, `train-seg`, `infer`, `eval` and `compare` subcommands.

pub mod error;
pub mod graph;
mod kernels;
pub mod tensor;

pub mod attention;
pub mod geometry;
pub mod optim;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod rpn;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};

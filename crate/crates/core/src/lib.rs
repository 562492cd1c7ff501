//! GCANet: a lightweight encoder-decoder saliency network for surface-defect
//! inspection, built on a self-contained rank-4 tensor engine with
//! reverse-mode autodiff.
//!
//! The crate covers the whole desk-scale workflow: the tensor engine
//! ([`tensor`]), the two channel-attention mechanisms and their multi-head
//! baseline ([`attention`]), the network itself ([`model`]), the hybrid
//! BCE + IoU + SSIM training objective ([`loss`]), the saliency metric suite
//! ([`metrics`]), and the data/training/inference pipeline ([`data`],
//! [`train`], [`infer`]) exposed through the `gcanet` binary.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod maps;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub use tensor::{Element, GradGraph, Shape4, Tensor4, Var};

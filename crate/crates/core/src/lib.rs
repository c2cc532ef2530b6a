//! Layer-wise cross distillation for compressing small convolutional networks
//! from a handful of labelled samples.
//!
//! A pretrained teacher is pruned or quantized one convolution at a time. Each
//! student layer is fitted to the teacher's feature maps with a proximal
//! gradient loop whose objective can cross teacher and student inputs:
//! correction (teacher input on both branches), imitation (student input on
//! both branches), their convex combination, or a soft mix of the two feature
//! maps. The [`theory`] module evaluates the Lipschitz error-propagation bound
//! that ties the per-layer objectives to the final cross-entropy gap.

pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod network;
pub mod prox;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, IdxError, ModelFormatError, Result};

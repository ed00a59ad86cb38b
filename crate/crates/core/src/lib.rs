//! Case-enhanced vision transformer (CEViT) on MNIST.
//!
//! A ViT-style encoder is trained either as a ten-way digit classifier or,
//! with a query and a reference image stacked along the channel axis, as a
//! same-class scorer. The scorer doubles as the similarity metric of a k-NN
//! classifier, and the CLS-token attention of both models yields patch masks
//! whose class-discriminative power is measured by a distraction benchmark.

pub mod attention;
pub mod data;
pub mod distraction;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod knn;
mod linalg;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

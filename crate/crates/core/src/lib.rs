//! Attention-guided multiple-instance learning for partially supervised
//! lesion segmentation in volumes: a from-scratch autodiff engine, a small
//! slice-wise convolutional backbone, the attention / global / local heads,
//! training, ablation baselines, synthetic data and evaluation.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod global;
pub mod gradcheck;
pub mod kernels;
pub mod local;
pub mod objective;
pub mod separation;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};

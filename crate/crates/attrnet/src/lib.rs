//! Multi-label visual attribute classification, end to end on the CPU:
//! a small tape-based autodiff tensor core, a VGG-style convolutional
//! network with a sigmoid head, batch-weighted cross-entropy training with
//! a two-phase freeze/finetune protocol, micro/macro mAP and ROC-AUC
//! evaluation, and excitation-style attention maps. A procedural shape
//! dataset generator provides ground truth for end-to-end verification.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

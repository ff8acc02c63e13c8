//! Desk-scale PCB defect detection: a small anchor-based single-stage
//! detector trained with focal, CIoU and distribution focal losses under
//! Nadam with cosine annealing, GAN-based defect augmentation, per-class
//! adaptive thresholds and COCO-style mAP evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluate;
pub mod gan;
pub mod losses;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

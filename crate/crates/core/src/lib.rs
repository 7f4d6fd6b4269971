//! Crowd density estimation with a cascaded multi-task network.
//!
//! The network jointly learns a coarse crowd-count group classifier (the
//! high-level prior) and a full-resolution density map regressor whose
//! decoder consumes the classifier's convolutional features. This crate holds
//! everything that is pure computation:
//!
//! * [`ground_truth`]: density maps from dot annotations.
//! * [`data`]: count-group quantization, class weights, patch augmentation
//!   and synthetic datasets.
//! * [`model`]: the network, its forward/backward passes and a finite
//!   difference gradient checker.
//! * [`objectives`]: the classification, density and unified losses.
//! * [`train`]: Adam training, evaluation metrics and cross-validation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, dataset
//! loading and the command line live in the `cmtl` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod ground_truth;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ground_truth::{DensityMap, GroundTruthConfig, HeadAnnotations, Point};
pub use tensor::{Real, Tensor};

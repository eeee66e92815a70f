//! Convolutional dictionary pair learning network (CDPL-Net).
//!
//! A LeNet-5 shaped classifier whose two pooling stages each feed a
//! dictionary pair learning layer: feature maps are reconstructed through a
//! learned synthesis/analysis dictionary pair, and the reconstruction error
//! plus an l1 penalty on the analysis dictionary joins the cross-entropy loss.
//!
//! Modules, bottom-up: [`tensor`], [`layers`], [`dpl`], [`optim`], [`data`],
//! [`model`], [`eval`]; [`gradcheck`] holds the finite-difference harness.

// `!(x >= 0)` is how argument checks reject NaN as well as negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dpl;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use data::{Batch, Dataset, Split};
pub use dpl::DictionaryPair;
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, FeatureDump};
pub use model::{LayerTag, LossComponents, Model, ModelConfig};
pub use optim::{AdamConfig, AdamState, TrainLog, TrainRecipe};
pub use rng::SeedStreams;
pub use tensor::{Matrix, Scalar, Tensor};

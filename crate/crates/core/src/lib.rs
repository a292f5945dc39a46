//! Likelihood-ratio out-of-distribution segmentation over dense feature maps.
//!
//! A frozen inlier segmentor (decoder + generative or discriminative head)
//! is combined with a small unknown-estimation module trained on pasted
//! pseudo-outliers. The per-pixel outlier score is
//! `log p_out(x) - log p_in(x) - max_k F_k(x)`.

// `!(x > 0.0)` is the NaN-rejecting form used by the config checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomalymix;
pub mod benchmark;
pub mod datamodel;
pub mod error;
pub mod gmm;
pub mod inference;
pub mod inlier;
pub mod metrics;
pub mod neural;
pub mod oracle;
pub mod scalar;
pub mod seed;
pub mod selfcheck;
mod tensors;
pub mod uem;

pub use error::{Error, Result};
pub use scalar::Real;

pub type FeatureMapF32 = datamodel::FeatureMap<f32>;
pub type FeatureMapF64 = datamodel::FeatureMap<f64>;
pub type ScoreMapF64 = datamodel::ScoreMap<f64>;
pub type GmmHeadF64 = gmm::GmmHead<f64>;
pub type MlpF64 = neural::Mlp<f64>;
pub type InlierModelF64 = inlier::InlierModel<f64>;
pub type UemModelF64 = uem::UemModel<f64>;

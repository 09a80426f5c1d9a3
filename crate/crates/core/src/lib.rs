//! Diametrical risk minimization.
//!
//! Instead of the empirical risk `R_m(w)`, train on the diametrical risk
//! `sup_{||v|| <= gamma} R_m(w + v)`: the worst empirical risk in a
//! parameter-space neighborhood of `w`. The crate provides
//!
//! * [`param`]: layered parameter vectors, norms, sphere sampling, projection;
//! * [`losses`]: the [`LossModel`] interface and scalar loss fixtures;
//! * [`mlp`]: a small ReLU network with softmax NLL and exact gradients;
//! * [`risk`]: empirical, true and diametrical risk estimators;
//! * [`optimizer`]: SGD for the empirical risk and the two SGD-DRM variants;
//! * [`analysis`]: neighborhood histograms, set excess, Monte-Carlo studies of
//!   the generalization gap and of confidence regions;
//! * [`data`] and [`experiment`]: synthetic label-noise data and the end-to-end
//!   ERM vs DRM comparison.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod mlp;
pub mod optimizer;
pub mod output;
pub mod param;
pub mod risk;
pub mod rng;

pub use error::{DrmError, Result};
pub use losses::{LossModel, Sample, SampleSource};
pub use param::{FeasibleSet, Layer, NormKind, NormValue, ParamVector};

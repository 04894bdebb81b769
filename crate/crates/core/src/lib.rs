//! Doubly robust targeted estimation of causal effects under networked
//! interference.
//!
//! A unit's outcome depends on its own binary treatment `t` and on the
//! neighborhood exposure `z` (the fraction of treated neighbors). The
//! estimator learns a shared graph representation, a generalized propensity
//! `g(t, z | x, x_N) = g1(t | ·) g2(z | ·)`, an outcome regression
//! `mu(t, z, ·)` and a B-spline perturbation `eps(t, z)`, and reports
//!
//! ```text
//! y_i(t, z) = mu(t, z, x_i, x_Ni) + eps(t, z) / (g1(t | ·) g2(z | ·))
//! ```
//!
//! averaged over units for dose-response values and differenced for effects.

#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod dgp;
pub mod error;
pub mod estimation;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod spline;
pub mod training;

pub use dataset::NetworkDataset;
pub use error::{Result, TnetError};
pub use estimation::{EffectEstimate, EstimandKind, EstimandSpec, Method};
pub use graph::Graph;
pub use linalg::Matrix;
pub use model::{ModelConfig, TNetModel};
pub use training::{TrainConfig, TrainOutcome};

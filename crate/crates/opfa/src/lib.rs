//! Order-preserving factor analysis (OPFA) for collections of time-course
//! matrices whose common temporal motifs appear with subject-specific delays.
//!
//! The model explains each subject's observation matrix `X_s` (time × variable)
//! as a nonnegative factor matrix `F`, circularly delayed per subject by an
//! order-preserving integer delay vector `d^s`, mixed by nonnegative scores
//! `A_s`:
//!
//! ```text
//! X_s ≈ window(M(F, d^s)) · A_s,     M(F, d)[:, i] = circular_shift(F[:, i], d_i)
//! ```
//!
//! Fitting minimizes the masked squared residual plus a group-lasso penalty on
//! the scores (shared sparsity pattern across subjects) and a squared smoothness
//! penalty on the factors, by block coordinate descent:
//!
//! * delays — exact branch-and-bound search over the order-preserving cone,
//! * scores — proximal forward-backward iteration (group soft-thresholding),
//! * factors — accelerated projected gradient over the nonnegative Frobenius ball.
//!
//! The crate also provides entrywise-holdout cross-validation for selecting the
//! number of factors and penalty weights, a synthetic data generator, and a
//! Monte-Carlo benchmark harness comparing the delay-aware fit against its
//! delay-free baseline.

pub mod cluster;
pub mod cv;
pub mod data;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod penalty;
pub mod quadratic;
pub mod shift;
pub mod solvers;
pub mod svg;
pub mod synth;
pub mod sweep;

pub use data::{column_sum_normalize, load_dataset, write_fit, ModelConfig, ObservationSet, Variant};
pub use error::OpfaError;
pub use fit::{fit_opfa, fit_opfa_warm, init_factors, opfa_objective, InitStrategy, OpfaFit};
pub use shift::{DelayVector, FactorMatrix, Window};

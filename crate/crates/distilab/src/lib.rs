//! Laboratory for progressive dataset distillation of two-layer ReLU networks
//! trained on single- and multi-index polynomial regression tasks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`hermite`], [`quadrature`]: dense k-tensor algebra,
//!   probabilists' Hermite polynomials with the ReLU expansion coefficients,
//!   and weighted quadrature against the sphere-slice density.
//! * [`task`]: multi-index regression tasks, dataset sampling, preprocessing,
//!   and analytic/Monte-Carlo derivative spectra.
//! * [`network`]: two-layer ReLU networks with symmetric initialization,
//!   gradients, feature kernels, and smooth surrogates.
//! * [`training`]: one-step first-layer training and ridge gradient descent on
//!   the output layer, with per-iteration gradient records.
//! * [`distill`]: the gradient-matching and performance-matching updates that
//!   produce the two distilled sets, plus the retraining procedures.
//! * [`construct`]: the rank-certified scalar sets used to place second-phase
//!   distilled points along hinge directions.
//! * [`oracle`]: closed-form population gradients and Monte-Carlo
//!   cross-checks.
//! * [`harness`]: experiment pipeline, sweeps, transfer runs, and rank tables
//!   behind the `distilab` command line.

pub mod construct;
pub mod distill;
pub mod harness;
pub mod hermite;
pub mod network;
pub mod oracle;
pub mod quadrature;
pub mod task;
pub mod tensor;
pub mod training;

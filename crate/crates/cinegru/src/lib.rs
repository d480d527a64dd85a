//! Spatio-temporal sequence classification at desk scale, from scratch.
//!
//! The crate bundles everything needed to run a complete frame-pair vs.
//! recurrent-model comparison on synthetic cine sequences:
//!
//! - [`tensor`] — dense tensors with reverse-mode differentiation;
//! - [`nn`] — layers (convolution, batch norm, linear) with seeded init;
//! - [`models`] — the frame-pair baseline and the encoder + ConvGRU hybrid;
//! - [`synthcine`] — a generator of labeled synthetic cine series whose
//!   positive class locally stops sliding along a two-region interface;
//! - [`train`] — loss, Adam, and the two-phase cross-validated protocol;
//! - [`stats`] — grouped k-fold splits, AUROC, bootstrap CIs and the paired
//!   permutation test;
//! - [`report`] — metrics/ROC artifacts (JSON, CSV, SVG);
//! - [`cli`] — the `cinegru` command-line front end.
//!
//! The narrative guide lives in `book/`; its code snippets are compiled and
//! run as doctests by the companion `cinegru-book` crate.

pub mod cli;
pub mod models;
pub mod nn;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synthcine;
pub mod tensor;
pub mod train;

pub use tensor::{Element, ParameterSet, Tensor};

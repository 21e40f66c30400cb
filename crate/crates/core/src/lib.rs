//! Semisupervised graph classification with self-supervised conditional
//! distribution learning.
//!
//! A shared GCN encoder embeds an original graph batch together with a
//! weakly and a strongly augmented view of it. Training runs in two
//! stages: a self-supervised pretraining stage on unlabeled graphs that
//! minimizes a cross-view similarity loss, and a fine-tuning stage on the
//! labeled graphs that minimizes cross-entropy plus the similarity loss and
//! a divergence between the weak-view and strong-view conditional
//! distributions. [`eval`] wraps both stages in a k-fold protocol.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod report;
pub mod seed;
pub mod train;

pub use error::{Error, ErrorKind, Result};

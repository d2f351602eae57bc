//! Federated active learning simulation over feature-vector datasets.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] — dataset ingestion, synthetic Gaussian mixtures and Dirichlet
//!   non-IID partitioning across clients.
//! * [`geometry`] — distances, nearest neighbours, typicality and k-means.
//! * [`model`] — softmax classifier heads trained with SGD + momentum.
//! * [`strategies`] — the acquisition functions a client uses to pick points
//!   to annotate.
//! * [`federation`] — client bookkeeping, FedAvg and round orchestration.
//! * [`evaluation`] — metrics, paired t-test comparison and the typicality
//!   shift analysis.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod geometry;
pub mod model;
pub mod seed;
pub mod strategies;

pub use error::{Error, Result};

//! Hypernetwork-accelerated hyperparameter selection for fully-connected
//! autoencoder outlier detectors.
//!
//! The crate is organized around three stages:
//!
//! 1. A hypernetwork ([`hypernet`]) maps a hyperparameter configuration
//!    (depth, widths via a compression rate, dropout, weight decay) onto the
//!    weights of a detector ([`dod`]), using architecture masks so a single
//!    fixed-size output serves every sub-architecture in the search space.
//! 2. An offline meta-training phase ([`meta`]) runs the hypernetwork over a
//!    corpus of labeled historical datasets, collects outlier scores and
//!    AUROC performance, and fits a proxy validator that predicts detection
//!    performance from hyperparameters plus data and score-set embeddings.
//! 3. An online search ([`search`]) alternates local hypernetwork training
//!    with gradient-free hyperparameter updates on a new, unlabeled dataset,
//!    and returns the configuration with the best predicted performance.
//!
//! Supporting modules: a small reverse-mode autodiff engine ([`tensor`]),
//! evaluation metrics ([`metrics`]), dataset ingestion and the synthetic
//! testbed ([`data`]), reference baselines and the evaluation protocol
//! ([`baselines`]), run configuration ([`runconfig`]), and independent
//! oracles used by the self-check suite and the tests ([`oracle`]).

pub mod baselines;
pub mod data;
pub mod dod;
pub mod error;
pub mod hypernet;
pub mod meta;
pub mod metrics;
pub mod oracle;
pub mod runconfig;
pub mod search;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};

//! Adaptive transformer inference with per-layer skipping gates and
//! entropy-based early-exit classifiers.
//!
//! The crate bundles:
//!
//! - a dense f64 reverse-mode autodiff engine ([`tensor`]),
//! - a small BERT-style encoder ([`encoder`]) with per-layer skipping gates
//!   and exit classifiers ([`adaptive`]),
//! - cross-layer contrastive losses ([`contrastive`]),
//! - a two-stage trainer with a soft-to-hard gate schedule ([`train`]),
//! - an adaptive inference engine with analytic FLOPs accounting ([`infer`],
//!   [`flops`]),
//! - dataset generation, report emission and a CLI ([`data`], [`report`],
//!   [`cli`]).

pub mod adaptive;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod infer;
pub mod params;
pub mod report;
pub mod rng;
pub mod settings;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Value;

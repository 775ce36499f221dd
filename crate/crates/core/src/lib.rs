//! Desk-scale preference alignment for flow-based world models.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: tensors, reverse-mode gradients, AdamW, checkpoints.
//! * [`microworld`]: a deterministic 2D manipulation simulator, defect
//!   injection, and rule-based four-dimensional scorers.
//! * [`prefdata`]: annotation and dimension-isolated preference pairs.
//! * [`flowgen`]: the conditional flow-matching policy, its denoising loss,
//!   ODE sampling, and an exact log-likelihood oracle.
//! * [`hero`]: the hierarchical four-head reward model and its losses.
//! * [`fpo`]: clipped policy optimization driven by denoising-loss ratios.
//! * [`bench`]: four-dimension benchmark scoring and report comparison.
//! * [`pipeline`]: end-to-end orchestration used by the CLI.

pub mod bench;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod flowgen;
pub mod fpo;
pub mod fsutil;
pub mod hero;
pub mod microworld;
pub mod pipeline;
pub mod prefdata;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};

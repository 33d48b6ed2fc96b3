//! Bidirectional sparse attention at desk scale.
//!
//! The pipeline: partition a (T, H, W) token grid into cuboid blocks, prune
//! queries inside each block (or window) by dissimilarity to the center
//! token, pick each query block's KV blocks with a statistical dynamic
//! threshold over pooled block scores, run gathered sparse attention, and
//! account for the FLOPs analytically. A dense reference path plus seeded
//! generation make every result reproducible and checkable against an
//! exact oracle.
//!
//! Determinism is load-bearing throughout: fixed reduction orders, f64
//! accumulation, explicit tie rules, and an order-preserving parallel map
//! mean outputs are bit-identical across runs and thread counts.

pub mod attn;
pub mod blocks;
pub mod error;
pub mod kvsparse;
pub mod latents;
pub mod metrics;
mod par;
pub mod qsparse;
pub mod schedule;

pub use error::{Error, Result};

//! Weakly-supervised video anomaly detection on per-segment feature sequences.
//!
//! A video is a bag of `T` segment features (`T x D` matrix) with only a
//! video-level normal/abnormal label. The pipeline recalibrates temporal
//! context with motion-adaptive channel shifting (`motar`), refines features
//! with soft category prototypes injected through cross-attention
//! (`core_refine`), trains with a three-part MIL objective (`objectives`,
//! `trainer`), and evaluates at the frame level (`metrics`). A synthetic
//! planted-anomaly corpus (`corpus`) makes every stage testable end to end.

pub mod autodiff;
pub mod config;
pub mod core_refine;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod motar;
pub mod nn;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};

//! Continual instruction tuning with hierarchically decoupled LoRA adapters
//! on a small decoder-only transformer: training, anchor routing, adapter
//! fusion, layer similarity analysis, and a synthetic benchmark.

pub mod adapters;
pub mod anchors;
pub mod bench;
pub mod checkpoint;
pub mod cka;
pub mod cli;
pub mod continual;
pub mod error;
pub mod model;
pub mod numerics;
pub mod parallel;

pub use error::{Error, Result};

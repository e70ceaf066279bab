//! Single-level dense detector on synthetic scenes.

pub mod data;
pub mod eval;
pub mod model;
pub mod postprocess;
pub mod stats;
pub mod targets;

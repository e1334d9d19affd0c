//! Vision-radar perception stack: synthetic waterway scenes, the dual-branch
//! clustering network with asymmetric fusion, training and evaluation.

pub mod aff;
pub mod checkpoint;
pub mod coc;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod heads;
pub mod loss;
pub mod model;
pub mod mtl;
pub mod neck;
pub mod nn;
pub mod radar;
pub mod render;
pub mod simota;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

//! Multi-label facade segmentation toolkit.
//!
//! * [`geo`]: facade images from building footprints and photospheres
//! * [`dataset`]: NEG/UNK/POS/EDG ground truth, class weights, perspective augmentation
//! * [`tensor`]: reverse-mode autodiff engine
//! * [`arch`]: baseline, multi-head, separable and compatibility networks
//! * [`inference`]: tiled full-image prediction
//! * [`metrics`]: pixel and object evaluation
//! * [`synth`]: procedural facades used as a training and test substrate

pub mod arch;
pub mod dataset;
pub mod error;
pub mod geo;
pub mod inference;
pub mod metrics;
pub mod raster;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

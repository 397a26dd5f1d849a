//! Corneal endothelium segmentation by regression of signed distance maps.
//!
//! The pipeline turns a specular microscopy image into cell and guttae
//! instances and the clinical morphometry derived from them:
//!
//! 1. [`image_io`] loads microscope exports and annotated masks.
//! 2. [`distance_codec`] encodes masks as a signed distance map.
//! 3. [`unet`] regresses that map from the image.
//! 4. [`postprocess`] decodes a predicted map into labeled regions.
//! 5. [`morphometry`] computes CD, MCA, HEX%, CV% and GAR%.
//!
//! [`synth`] generates tessellation images with exact ground truth,
//! [`evaluation`] provides the agreement statistics, and [`annotation`]
//! is the region editing engine behind the curation service.

pub mod annotation;
pub mod config;
pub mod distance_codec;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod image_io;
pub mod morphometry;
pub mod pipeline;
pub mod postprocess;
pub mod service;
pub mod synth;
pub mod unet;

pub use error::{Error, Result};

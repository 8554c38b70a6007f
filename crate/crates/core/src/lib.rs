//! Semi-supervised learning-based deformable registration and multi-atlas
//! segmentation for volumetric images with few labelled atlases.

pub mod augment;
pub mod error;
pub mod experiment;
pub mod fusion;
mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod plots;
pub mod regnet;
pub mod segnet;
pub mod synth;
pub mod trainer;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use volume::{argmax_labels, argmax_scores, make_one_hot, Atlas, LabelMap, ProbMap, Volume};
pub use warp::{compose_fields, identity_field, warp_probmap, warp_scalar, DisplacementField};

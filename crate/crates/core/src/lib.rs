//! Left-ventricle contouring for echo clips.
//!
//! A dual-decoder U-Net (optionally with a convolutional GRU bottleneck) predicts,
//! for every frame of a 15-frame window, a distance-to-contour map and seven contour
//! points. The endocardial contour is then extracted as the shortest geodesic path
//! through the points on the predicted map and resampled to 21 points.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod synthdata;
pub mod tns;
pub mod trainer;

pub use error::{Error, Result};

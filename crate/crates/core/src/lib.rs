//! Stereo X-ray line tracking: phantoms, projection, deformable registration,
//! feature detection and evaluation.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod grid;
pub mod io;
pub mod phantom;
pub mod polyline;
pub mod projector;
pub mod registration;
pub mod rng;
pub mod tracking;

pub use error::{Error, Result};
pub use grid::{
    gaussian_smooth, sample_bilinear, sample_trilinear, warp_image, warp_volume, DisplacementField2,
    DisplacementField3, GaussianSmooth, ScalarImage, ScalarVolume,
};
pub use polyline::{rasterize_polyline, rasterize_polylines, Point3, Polyline3};

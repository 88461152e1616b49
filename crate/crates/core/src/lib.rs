//! Landmark-based 3D face shape modelling and subject identification.
//!
//! The pipeline runs from dense face meshes to subject labels:
//!
//! * [`shape`] aligns landmark sets with Procrustes analysis,
//! * [`tdsm`] learns a bounded point-distribution model, tabulates
//!   instances of it and fits them to point-cloud meshes,
//! * [`features`] turns landmarks into centroid-normalised feature vectors
//!   and quadrant subsets,
//! * [`classify`] trains random-forest, linear SVM and LSTM identifiers on a
//!   time-ordered split,
//! * [`synthdata`] generates face populations with known structure and
//!   reads/writes the file formats.

mod binio;
pub mod classify;
pub mod error;
pub mod features;
pub mod numerics;
pub mod rng;
pub mod shape;
pub mod synthdata;
pub mod tdsm;

pub use error::{Error, Result};

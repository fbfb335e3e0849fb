//! Converts trained Gaussian-splat scenes into pseudo-orthophotos, builds
//! drone-only Fisher-vector vocabularies and evaluates cross-view retrieval.

pub mod digest;
pub mod error;
pub mod features;
pub mod fisher_agg;
pub mod gaussian_field;
pub mod ground_plane;
pub mod inpaint;
pub mod ortho_renderer;
pub mod point_sampler;
pub mod raster;
pub mod retrieval;
pub mod sh;
pub mod synthetic;
pub mod vocabulary;

pub use error::{Error, Result};

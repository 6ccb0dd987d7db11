//! S2Vec: self-supervised embeddings of the built environment over
//! hierarchical S2 cells.
//!
//! The pipeline partitions a region into patch-level cells, rasterizes their
//! normalized feature histograms into image-level grids, pretrains a masked
//! autoencoder on those grids, and keeps the trained patch projection as a
//! per-cell embedding. The [`downstream`] module evaluates the embeddings on
//! regression tasks.

pub mod downstream;
pub mod error;
pub mod ingest;
pub mod io;
pub mod mae;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod s2geom;
pub mod synth;

pub use error::{Error, Result};
pub use s2geom::{CellId, GridPos, LatLng};

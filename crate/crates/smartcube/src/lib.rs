//! Desk-scale spatiotemporal datacube toolkit: static STAC catalog search,
//! grid alignment and resampling, lazy chunked 4-D cubes executed over a
//! content-addressed task graph, a chunked on-disk store with Prometheus
//! metrics, and a factorized change-segmentation model.

pub mod config;
pub mod cube;
pub mod error;
pub mod model;
pub mod graph;
pub mod grid;
pub mod pipeline;
pub mod stac;

pub use error::{Error, Result};

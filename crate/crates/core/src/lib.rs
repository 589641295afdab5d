//! Core algorithms for city-likeness analysis of urban imagery.

pub mod dataset;
pub mod error;
pub mod geo;
pub mod imagery;
pub mod inference;
pub mod network;
pub mod raster;
pub mod rendering;
pub mod seed;
pub mod segmentation;

pub use error::{Error, Result};
pub use raster::{RasterImage, Rgb};

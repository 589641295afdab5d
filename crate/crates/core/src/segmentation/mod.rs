//! Mean-shift segmentation of street-level imagery.
//!
//! Each pixel climbs to a density mode in the joint (x, y, L*, u*, v*)
//! space using flat kernels, then connected pixels with similar modes are
//! fused and regions below the minimum density are absorbed by their
//! closest-colored neighbour.

pub mod color;
mod fusion;
mod meanshift;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub use fusion::fuse_regions;
pub use meanshift::{meanshift_filter, meanshift_modes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    pub spatial_radius: f64,
    pub range_radius: f64,
    pub min_density: usize,
    pub max_iterations: usize,
    pub convergence_eps: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            spatial_radius: 6.0,
            range_radius: 4.5,
            min_density: 50,
            max_iterations: 100,
            convergence_eps: 0.01,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spatial_radius > 0.0 && self.range_radius > 0.0) {
            return Err(Error::invalid("segmentation radii must be positive"));
        }
        if self.min_density < 1 || self.max_iterations < 1 {
            return Err(Error::invalid("min_density and max_iterations must be at least 1"));
        }
        if !(self.convergence_eps >= 0.0) {
            return Err(Error::invalid("convergence_eps must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedImage {
    /// Every pixel carries its region's mean color.
    pub image: RasterImage,
    /// Region id per pixel, row-major, contiguous from 0.
    pub labels: Vec<u32>,
    pub region_count: usize,
}

impl SegmentedImage {
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Mean-shift filtering followed by region fusion.
pub fn segment(img: &RasterImage, params: &SegmentationParams) -> Result<SegmentedImage> {
    let filtered = meanshift_filter(img, params)?;
    fuse_regions(&filtered, params)
}

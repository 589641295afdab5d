//! Location-keyed imagery: provider abstraction, disk cache, the offline
//! synthetic provider, quality filtering and resampling.

pub mod benchmark;
mod cache;
mod config;
mod remote;
mod sampling;
mod store;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::SampleLocation;
use crate::raster::{luma, RasterImage, Rgb};

pub use cache::{CachedProvider, DiskCache};
pub use config::{ProviderConfig, ProviderKind};
pub use remote::{HttpResponse, HttpTransport, RateLimiter, RemoteProvider, UreqTransport};
pub use store::{read_city_images, write_city_images};
pub use sampling::{fetch_all, random_heading, sample_with_replacement, SampleOutcome};
pub use synthetic::{
    benchmark_styles, render_request, synth_city_image, Palette, StyleSpec, StylesFile, SyntheticProvider,
};

pub const DEFAULT_ZOOM: u32 = 16;
pub const DEFAULT_SIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Map,
    Satellite,
    Streetview,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Map, Source::Satellite, Source::Streetview];

    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Map => "map",
            Source::Satellite => "satellite",
            Source::Streetview => "streetview",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Source::Map),
            "satellite" => Ok(Source::Satellite),
            "streetview" => Ok(Source::Streetview),
            other => Err(Error::invalid(format!(
                "unknown imagery source {other:?} (expected map, satellite or streetview)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageryRequest {
    pub location: SampleLocation,
    pub source: Source,
    pub zoom: u32,
    pub width: u32,
    pub height: u32,
    pub pitch: f64,
    pub fov: f64,
    pub heading: u16,
}

impl ImageryRequest {
    pub fn new(location: SampleLocation, source: Source) -> Self {
        ImageryRequest {
            location,
            source,
            zoom: DEFAULT_ZOOM,
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            pitch: 0.0,
            fov: 90.0,
            heading: 0,
        }
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_heading(mut self, heading: u16) -> Self {
        self.heading = heading;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.location.point().validate()?;
        if self.heading > 359 {
            return Err(Error::invalid(format!("heading {} outside [0, 359]", self.heading)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(self.fov > 0.0 && self.fov <= 180.0) {
            return Err(Error::invalid(format!("field of view {} outside (0, 180]", self.fov)));
        }
        Ok(())
    }

    /// Content hash of the request, hex-encoded. The provider fingerprint is
    /// mixed in so two providers never share cache entries.
    pub fn cache_key(&self, provider_fingerprint: &str) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        let mut h = Sha256::new();
        h.update(provider_fingerprint.as_bytes());
        h.update([0u8]);
        h.update(&canonical);
        hex::encode(h.finalize())
    }
}

/// Anything that can turn an [`ImageryRequest`] into pixels.
pub trait ImageryProvider: Send + Sync {
    /// Stable identity of the provider and its configuration.
    fn fingerprint(&self) -> String;

    fn fetch(&self, request: &ImageryRequest) -> Result<RasterImage>;
}

impl<P: ImageryProvider + ?Sized> ImageryProvider for Box<P> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn fetch(&self, request: &ImageryRequest) -> Result<RasterImage> {
        (**self).fetch(request)
    }
}

impl<P: ImageryProvider + ?Sized> ImageryProvider for std::sync::Arc<P> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn fetch(&self, request: &ImageryRequest) -> Result<RasterImage> {
        (**self).fetch(request)
    }
}

/// Validates the request, fetches, and checks the delivered dimensions.
pub fn fetch_image(provider: &dyn ImageryProvider, request: &ImageryRequest) -> Result<RasterImage> {
    request.validate()?;
    let img = provider.fetch(request)?;
    if img.width() != request.width || img.height() != request.height {
        return Err(Error::ProviderUnavailable(format!(
            "provider returned {}x{} for a {}x{} request",
            img.width(),
            img.height(),
            request.width,
            request.height
        )));
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Ok,
    Unusable,
}

/// Mean Rec. 601 luma below which an image counts as dark.
pub const MIN_MEAN_LUMA: f64 = 20.0;
/// Share of the most frequent color above which an image counts as blank.
pub const MAX_DOMINANT_SHARE: f64 = 0.98;

/// Flags dark, blank, tunnel-like images.
pub fn quality_check(img: &RasterImage) -> Quality {
    let n = img.pixel_count();
    if n == 0 {
        return Quality::Unusable;
    }
    let mut luma_sum = 0.0;
    let mut counts: std::collections::HashMap<Rgb, usize> = std::collections::HashMap::new();
    for c in img.iter_rgb() {
        luma_sum += luma(c);
        *counts.entry(c).or_insert(0) += 1;
    }
    let dominant = counts.values().copied().max().unwrap_or(0);
    if luma_sum / (n as f64) < MIN_MEAN_LUMA || dominant as f64 > MAX_DOMINANT_SHARE * n as f64 {
        Quality::Unusable
    } else {
        Quality::Ok
    }
}

//! Fixtures shared by the benchmarks.

use citylike_core::geo::{LocationKind, SampleLocation};
use citylike_core::imagery::{benchmark_styles, synth_city_image, Source};
use citylike_core::network::Activations;
use citylike_core::RasterImage;

pub fn location() -> SampleLocation {
    SampleLocation { city_id: "bench".into(), kind: LocationKind::Grid, lat: 48.8566, lon: 2.3522 }
}

/// A 256 px synthetic tile.
pub fn tile(source: Source) -> RasterImage {
    let style = &benchmark_styles(1)[0];
    synth_city_image(style, &location(), source, 1)
}

/// Deterministic pseudo-random input batch in `[-1, 1)`.
pub fn input_batch(n: usize, size: usize) -> Activations<f32> {
    let mut s = 0x9e37_79b9u32;
    let data: Vec<f32> = (0..n * size * size * 3)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s % 256) as f32 / 128.0 - 1.0
        })
        .collect();
    Activations::from_nhwc(n, size, size, 3, &data)
}

use std::sync::Mutex;

use citylike_core::geo::{CityRecord, LocationKind, SampleLocation, SamplingPolicy, WaterMask};
use citylike_core::imagery::{
    quality_check, sample_with_replacement, CachedProvider, DiskCache, ImageryProvider, ImageryRequest, Quality,
    Source,
};
use citylike_core::{RasterImage, Result};

fn noise(w: u32, h: u32, mut s: u64) -> RasterImage {
    let px = (0..w * h * 3)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 200) as u8 + 40
        })
        .collect();
    RasterImage::new(w, h, px).unwrap()
}

/// Returns noise, or a black frame for roughly half of all locations.
struct Flaky {
    unusable_share: f64,
    headings: Mutex<Vec<u16>>,
}

impl Flaky {
    fn new(unusable_share: f64) -> Self {
        Flaky { unusable_share, headings: Mutex::new(Vec::new()) }
    }
}

impl ImageryProvider for Flaky {
    fn fingerprint(&self) -> String {
        format!("flaky:{}", self.unusable_share)
    }

    fn fetch(&self, r: &ImageryRequest) -> Result<RasterImage> {
        self.headings.lock().unwrap().push(r.heading);
        let h = r.location.lat.to_bits().wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ r.location.lon.to_bits();
        let u = (h.wrapping_mul(0xbf58_476d_1ce4_e5b9) >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.unusable_share {
            Ok(RasterImage::filled(r.width, r.height, [0, 0, 0]))
        } else {
            Ok(noise(r.width, r.height, h | 1))
        }
    }
}

fn city() -> CityRecord {
    CityRecord {
        id: "sydney_aus".into(),
        name: "Sydney".into(),
        country: "AUS".into(),
        lat: -33.8688,
        lon: 151.2093,
        population: 5_000_000,
    }
}

fn template(source: Source) -> ImageryRequest {
    let loc = SampleLocation { city_id: String::new(), kind: LocationKind::Disk, lat: 0.0, lon: 0.0 };
    ImageryRequest::new(loc, source).with_size(16, 16)
}

#[test]
fn half_unusable_provider_costs_about_two_attempts_per_image() {
    let p = Flaky::new(0.5);
    let got = sample_with_replacement(&p, &city(), 100, &template(Source::Map), &SamplingPolicy::default(), &WaterMask::empty(), 3, 4)
        .unwrap();
    assert_eq!(got.items.len(), 100);
    assert!((158..=242).contains(&got.attempts), "{} attempts", got.attempts);
    assert!(got.items.iter().all(|(_, img)| quality_check(img) == Quality::Ok));
}

#[test]
fn streetview_headings_are_uniform() {
    let p = Flaky::new(0.0);
    let n = 10_000;
    let got = sample_with_replacement(&p, &city(), n, &template(Source::Streetview), &SamplingPolicy::default(), &WaterMask::empty(), 8, 1)
        .unwrap();
    let mut bins = [0usize; 36];
    for (r, _) in &got.items {
        assert!(r.heading <= 359);
        bins[r.heading as usize / 10] += 1;
    }
    let expected = n as f64 / 36.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 35 degrees of freedom, p = 0.001
    assert!(chi2 < 66.62, "chi-square {chi2}");
}

#[test]
fn map_requests_keep_heading_zero() {
    let p = Flaky::new(0.0);
    sample_with_replacement(&p, &city(), 50, &template(Source::Map), &SamplingPolicy::default(), &WaterMask::empty(), 8, 1)
        .unwrap();
    assert!(p.headings.lock().unwrap().iter().all(|&h| h == 0));
}

#[test]
fn cached_sampling_is_byte_identical_and_skips_the_provider() {
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let cached = CachedProvider::new(Flaky::new(0.3), DiskCache::new(dir.path()));
        let got = sample_with_replacement(&cached, &city(), 20, &template(Source::Map), &SamplingPolicy::default(), &WaterMask::empty(), 4, 2)
            .unwrap();
        let calls = cached.inner().headings.lock().unwrap().len();
        (got, calls)
    };
    let (a, first_calls) = run();
    let (b, second_calls) = run();
    assert!(first_calls >= 20);
    assert_eq!(second_calls, 0);
    assert_eq!(a.attempts, b.attempts);
    for ((ra, ia), (rb, ib)) in a.items.iter().zip(&b.items) {
        assert_eq!(ra, rb);
        assert_eq!(ia.to_png().unwrap(), ib.to_png().unwrap());
    }
}

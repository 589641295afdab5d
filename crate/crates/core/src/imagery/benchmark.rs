//! Self-contained synthetic classification benchmark: one city per style.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::synthetic::{benchmark_styles, render_request, StylesFile};
use super::{random_heading, write_city_images, ImageryRequest, Source};
use crate::error::{Error, Result};
use crate::geo::{radius_for_population, sample_disk, write_cities, CityRecord, LatLon, SamplingPolicy, WaterMask};
use crate::raster::write_atomic;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub styles: usize,
    pub images_per_style: usize,
    pub tile_px: u32,
    pub source: Source,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkLayout {
    pub cities_file: PathBuf,
    pub styles_file: PathBuf,
    /// Holds one `<city_id>/` directory per style.
    pub image_dir: PathBuf,
    pub cities: Vec<CityRecord>,
}

/// City `i` of the benchmark, spread over the globe.
pub fn benchmark_city(i: usize, style_id: &str) -> CityRecord {
    CityRecord {
        id: style_id.to_string(),
        name: format!("Synthetic {i}"),
        country: "SYN".into(),
        lat: -50.0 + (i * 37 % 100) as f64,
        lon: -175.0 + (i * 71 % 350) as f64,
        population: 1_000_000,
    }
}

/// Writes `cities.csv`, `styles.json` and `images/<source>/<city>/`.
pub fn write_benchmark(out: &Path, spec: &BenchmarkSpec) -> Result<BenchmarkLayout> {
    if spec.styles == 0 || spec.images_per_style == 0 || spec.tile_px == 0 {
        return Err(Error::invalid("benchmark needs styles, images and a tile size"));
    }
    let styles = benchmark_styles(spec.styles);
    let cities: Vec<CityRecord> = styles.iter().enumerate().map(|(i, s)| benchmark_city(i, &s.style_id)).collect();
    let file = StylesFile { styles, assignments: Default::default() };
    let policy = SamplingPolicy::default();
    let mask = WaterMask::empty();
    let image_dir = out.join("images").join(spec.source.as_str());
    file.styles
        .par_iter()
        .zip(&cities)
        .map(|(style, city)| {
            let r = radius_for_population(city.population as i64, &policy)?;
            let locs = sample_disk(&city.id, LatLon::new(city.lat, city.lon), r, spec.images_per_style, &mask, spec.seed)?;
            let mut rng = seed::rng(spec.seed, "benchmark-heading", &[city.id.as_bytes()]);
            let items: Vec<_> = locs
                .into_iter()
                .map(|loc| {
                    let req = ImageryRequest::new(loc, spec.source)
                        .with_size(spec.tile_px, spec.tile_px)
                        .with_heading(random_heading(&mut rng));
                    let img = render_request(style, &req, spec.seed);
                    (req, img)
                })
                .collect();
            write_city_images(&image_dir.join(&city.id), &items)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let cities_file = out.join("cities.csv");
    write_cities(&cities_file, &cities)?;
    let styles_file = out.join("styles.json");
    let mut json = serde_json::to_vec_pretty(&file)?;
    json.push(b'\n');
    write_atomic(&styles_file, &json)?;
    Ok(BenchmarkLayout { cities_file, styles_file, image_dir, cities })
}

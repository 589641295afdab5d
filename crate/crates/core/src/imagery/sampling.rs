use rand::Rng as _;
use rayon::prelude::*;

use super::{fetch_image, quality_check, ImageryProvider, ImageryRequest, Quality, Source};
use crate::error::{Error, Result};
use crate::geo::{radius_for_population, CityRecord, DiskSampler, LocationKind, SampleLocation, SamplingPolicy, WaterMask, REJECTION_BUDGET};
use crate::raster::RasterImage;
use crate::seed;

/// Uniform street-view heading in `[0, 359]`.
pub fn random_heading(rng: &mut seed::Rng) -> u16 {
    rng.random_range(0..=359)
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub items: Vec<(ImageryRequest, RasterImage)>,
    /// Fetch attempts consumed, including unusable and missing imagery.
    pub attempts: usize,
}

/// Fetches every request with at most `max_in_flight` concurrent calls.
/// Results come back in request order.
pub fn fetch_all(
    provider: &dyn ImageryProvider,
    requests: &[ImageryRequest],
    max_in_flight: usize,
) -> Vec<Result<RasterImage>> {
    if max_in_flight <= 1 || requests.len() <= 1 {
        return requests.iter().map(|r| fetch_image(provider, r)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(max_in_flight).build() {
        Ok(pool) => pool.install(|| requests.par_iter().map(|r| fetch_image(provider, r)).collect()),
        Err(_) => requests.iter().map(|r| fetch_image(provider, r)).collect(),
    }
}

/// Draws disk locations for `city` and fetches imagery until `n` usable
/// images are collected, re-drawing on unusable or missing imagery.
/// Gives up after `10 * n` attempts.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_replacement(
    provider: &dyn ImageryProvider,
    city: &CityRecord,
    n: usize,
    template: &ImageryRequest,
    policy: &SamplingPolicy,
    mask: &WaterMask,
    seed: u64,
    max_in_flight: usize,
) -> Result<SampleOutcome> {
    let mut out = SampleOutcome { items: Vec::with_capacity(n), attempts: 0 };
    if n == 0 {
        return Ok(out);
    }
    city.validate()?;
    let radius = radius_for_population(city.population as i64, policy)?;
    let sampler = DiskSampler::new(city.centroid(), radius, mask)?.with_earth_radius(policy.earth_radius_km);
    let mut rng = seed::rng(seed, "imagery-sample", &[city.id.as_bytes(), template.source.as_str().as_bytes()]);
    let budget = 10 * n;

    while out.items.len() < n && out.attempts < budget {
        let chunk = (n - out.items.len()).min(budget - out.attempts);
        let mut requests = Vec::with_capacity(chunk);
        for _ in 0..chunk {
            let (p, _) = sampler.draw_dry(&mut rng, REJECTION_BUDGET);
            let p = p.ok_or_else(|| {
                Error::SamplingExhausted(format!("city {}: sampling disk is entirely water", city.id))
            })?;
            let heading = if template.source == Source::Streetview { random_heading(&mut rng) } else { 0 };
            let mut r = template.clone().with_heading(heading);
            r.location = SampleLocation { city_id: city.id.clone(), kind: LocationKind::Disk, lat: p.lat, lon: p.lon };
            requests.push(r);
        }
        let results = fetch_all(provider, &requests, max_in_flight);
        for (req, res) in requests.into_iter().zip(results) {
            if out.items.len() == n {
                break;
            }
            out.attempts += 1;
            match res {
                Ok(img) if quality_check(&img) == Quality::Ok => out.items.push((req, img)),
                Ok(_) | Err(Error::NoImagery { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if out.items.len() < n {
        return Err(Error::SamplingExhausted(format!(
            "city {}: {} of {n} usable images after {} attempts",
            city.id,
            out.items.len(),
            out.attempts
        )));
    }
    Ok(out)
}

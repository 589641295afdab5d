//! Geodesic helpers and location sampling.
//!
//! Training cities are sampled uniformly over a population-scaled disk
//! around the centroid; evaluation cities are sampled on a fixed-spacing
//! grid over a user-supplied bounding box. Both drop points that fall on
//! water.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed;

/// IUGG mean earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Metres per degree of latitude used for grid spacing.
pub const METRES_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!(
                "coordinate out of range: ({}, {})",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityRecord {
    pub id: String,
    pub name: String,
    pub country: String,
    pub lat: f64,
    pub lon: f64,
    pub population: u64,
}

impl CityRecord {
    pub fn centroid(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }

    pub fn validate(&self) -> Result<()> {
        self.centroid()
            .validate()
            .map_err(|e| Error::invalid(format!("city {}: {e}", self.id)))?;
        if self.population < 1 {
            return Err(Error::invalid(format!("city {}: population must be >= 1", self.id)));
        }
        Ok(())
    }
}

/// Reads a cities CSV with header `id,name,country,lat,lon,population`.
pub fn read_cities(path: &Path) -> Result<Vec<CityRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let city: CityRecord = rec?;
        city.validate()?;
        out.push(city);
    }
    Ok(out)
}

pub fn write_cities(path: &Path, cities: &[CityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cities {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub base_area_km2: f64,
    pub base_population: f64,
    pub exponent: f64,
    pub earth_radius_km: f64,
    pub min_radius_km: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            base_area_km2: 28.27,
            base_population: 300_000.0,
            exponent: 0.85,
            earth_radius_km: EARTH_RADIUS_KM,
            min_radius_km: 1.5,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.base_area_km2,
            self.base_population,
            self.exponent,
            self.earth_radius_km,
            self.min_radius_km,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("sampling policy constants must be positive"));
        }
        if self.exponent > 1.0 {
            return Err(Error::invalid("sampling exponent must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Sampling radius in km for a city of population `p`.
///
/// The area scales as `(p / base_population)^exponent`; the radius never
/// drops below `min_radius_km`.
pub fn radius_for_population(p: i64, policy: &SamplingPolicy) -> Result<f64> {
    if p <= 0 {
        return Err(Error::invalid(format!("population must be positive, got {p}")));
    }
    policy.validate()?;
    let ratio = p as f64 / policy.base_population;
    let r = (policy.base_area_km2 / PI * ratio.powf(policy.exponent)).sqrt();
    Ok(r.max(policy.min_radius_km))
}

/// Great-circle distance on a sphere of radius `radius_km`.
pub fn haversine_km(a: LatLon, b: LatLon, radius_km: f64) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(haversine_unchecked(a, b, radius_km))
}

pub(crate) fn haversine_unchecked(a: LatLon, b: LatLon, radius_km: f64) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * radius_km * h.sqrt().min(1.0).asin()
}

/// Point reached by travelling `dist_km` from `origin` along initial
/// bearing `bearing` (radians, clockwise from north).
pub fn destination(origin: LatLon, bearing: f64, dist_km: f64, radius_km: f64) -> LatLon {
    let delta = dist_km / radius_km;
    let p1 = origin.lat.to_radians();
    let l1 = origin.lon.to_radians();
    let sin_p2 = p1.sin() * delta.cos() + p1.cos() * delta.sin() * bearing.cos();
    let p2 = sin_p2.clamp(-1.0, 1.0).asin();
    let l2 = l1
        + (bearing.sin() * delta.sin() * p1.cos()).atan2(delta.cos() - p1.sin() * p2.sin());
    LatLon::new(p2.to_degrees(), wrap_lon(l2.to_degrees()))
}

fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 && lon > 0.0 {
        180.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationKind {
    Disk,
    Grid,
}

impl fmt::Display for LocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocationKind::Disk => "disk",
            LocationKind::Grid => "grid",
        })
    }
}

impl FromStr for LocationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(LocationKind::Disk),
            "grid" => Ok(LocationKind::Grid),
            other => Err(Error::invalid(format!("unknown location kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLocation {
    pub city_id: String,
    pub kind: LocationKind,
    pub lat: f64,
    pub lon: f64,
}

impl SampleLocation {
    pub fn point(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

/// Reads a locations CSV with header `city_id,kind,lat,lon`.
pub fn read_locations(path: &Path) -> Result<Vec<SampleLocation>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let loc: SampleLocation = rec?;
        loc.point().validate()?;
        out.push(loc);
    }
    Ok(out)
}

pub fn write_locations(path: &Path, locations: &[SampleLocation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in locations {
        w.serialize(l)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A closed ring of vertices. The closing vertex is stored explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ring(Vec<LatLon>);

impl Ring {
    /// Builds a ring, appending the first vertex if the input is open.
    pub fn new(mut vertices: Vec<LatLon>) -> Result<Self> {
        if let (Some(first), Some(last)) = (vertices.first().copied(), vertices.last().copied()) {
            if first != last {
                vertices.push(first);
            }
        }
        // a closed triangle has four stored vertices
        if vertices.len() < 4 {
            return Err(Error::invalid("water ring needs at least 3 distinct vertices"));
        }
        for v in &vertices {
            v.validate()?;
        }
        Ok(Ring(vertices))
    }

    pub fn vertices(&self) -> &[LatLon] {
        &self.0
    }

    /// Even-odd crossing test in the (lon, lat) plane.
    fn crosses(&self, p: LatLon) -> bool {
        let mut inside = false;
        for w in self.0.windows(2) {
            let (a, b) = (w[0], w[1]);
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
                if p.lon < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Water polygons removed from sampling areas. Each polygon is a list of
/// rings combined with the even-odd rule, so inner rings act as holes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WaterMask {
    pub polygons: Vec<Vec<Ring>>,
}

impl WaterMask {
    pub fn empty() -> Self {
        WaterMask::default()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn contains(&self, p: LatLon) -> bool {
        self.polygons.iter().any(|rings| {
            rings.iter().fold(false, |acc, r| acc ^ r.crosses(p))
        })
    }

    /// Parses GeoJSON (`FeatureCollection`, `Feature`, `Polygon`,
    /// `MultiPolygon` or `GeometryCollection`). Coordinates are `[lon, lat]`.
    pub fn from_geojson(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let mut mask = WaterMask::default();
        collect_geojson(&v, &mut mask)?;
        Ok(mask)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_geojson(&text)
    }

    pub fn to_geojson(&self) -> Value {
        let coords: Vec<Value> = self
            .polygons
            .iter()
            .map(|rings| {
                Value::Array(
                    rings
                        .iter()
                        .map(|r| {
                            Value::Array(
                                r.0.iter()
                                    .map(|v| serde_json::json!([v.lon, v.lat]))
                                    .collect(),
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        serde_json::json!({"type": "MultiPolygon", "coordinates": coords})
    }
}

fn collect_geojson(v: &Value, mask: &mut WaterMask) -> Result<()> {
    let kind = v.get("type").and_then(Value::as_str).unwrap_or("");
    match kind {
        "FeatureCollection" => {
            for f in v.get("features").and_then(Value::as_array).into_iter().flatten() {
                collect_geojson(f, mask)?;
            }
        }
        "Feature" => {
            if let Some(g) = v.get("geometry") {
                if !g.is_null() {
                    collect_geojson(g, mask)?;
                }
            }
        }
        "GeometryCollection" => {
            for g in v.get("geometries").and_then(Value::as_array).into_iter().flatten() {
                collect_geojson(g, mask)?;
            }
        }
        "Polygon" => mask.polygons.push(parse_polygon(coords(v)?)?),
        "MultiPolygon" => {
            let polys = coords(v)?
                .as_array()
                .ok_or_else(|| Error::invalid("MultiPolygon coordinates must be an array"))?;
            for p in polys {
                mask.polygons.push(parse_polygon(p)?);
            }
        }
        other => {
            return Err(Error::invalid(format!("unsupported GeoJSON type {other:?}")));
        }
    }
    Ok(())
}

fn coords(v: &Value) -> Result<&Value> {
    v.get("coordinates")
        .ok_or_else(|| Error::invalid("geometry without coordinates"))
}

fn parse_polygon(v: &Value) -> Result<Vec<Ring>> {
    let rings = v
        .as_array()
        .ok_or_else(|| Error::invalid("polygon must be an array of rings"))?;
    rings
        .iter()
        .map(|ring| {
            let pts = ring
                .as_array()
                .ok_or_else(|| Error::invalid("ring must be an array of positions"))?;
            let verts = pts
                .iter()
                .map(|p| {
                    let lon = p.get(0).and_then(Value::as_f64);
                    let lat = p.get(1).and_then(Value::as_f64);
                    match (lat, lon) {
                        (Some(lat), Some(lon)) => Ok(LatLon::new(lat, lon)),
                        _ => Err(Error::invalid("position must be [lon, lat]")),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ring::new(verts)
        })
        .collect()
}

/// Draws points uniformly over the area of a disk, rejecting water.
pub struct DiskSampler<'a> {
    center: LatLon,
    radius_km: f64,
    earth_radius_km: f64,
    mask: &'a WaterMask,
}

impl<'a> DiskSampler<'a> {
    pub fn new(center: LatLon, radius_km: f64, mask: &'a WaterMask) -> Result<Self> {
        center.validate()?;
        if !(radius_km.is_finite() && radius_km > 0.0) {
            return Err(Error::invalid(format!("disk radius must be positive, got {radius_km}")));
        }
        Ok(DiskSampler {
            center,
            radius_km,
            earth_radius_km: EARTH_RADIUS_KM,
            mask,
        })
    }

    pub fn with_earth_radius(mut self, earth_radius_km: f64) -> Self {
        self.earth_radius_km = earth_radius_km;
        self
    }

    /// One uniform point on the disk, ignoring the mask.
    pub fn draw(&self, rng: &mut seed::Rng) -> LatLon {
        let u: f64 = rng.random();
        let theta: f64 = rng.random::<f64>() * 2.0 * PI;
        let d = self.radius_km * u.sqrt();
        destination(self.center, theta, d, self.earth_radius_km)
    }

    /// Draws until a dry point is found or `budget` attempts are spent.
    /// Returns the point and the number of attempts used.
    pub fn draw_dry(&self, rng: &mut seed::Rng, budget: usize) -> (Option<LatLon>, usize) {
        for attempt in 1..=budget {
            let p = self.draw(rng);
            if !self.mask.contains(p) {
                return (Some(p), attempt);
            }
        }
        (None, budget)
    }
}

/// Attempts allowed per accepted point before giving up (99.9% rejection).
pub const REJECTION_BUDGET: usize = 1000;

/// `n` dry points uniformly over the disk of `r_km` around `center`.
pub fn sample_disk(
    city_id: &str,
    center: LatLon,
    r_km: f64,
    n: usize,
    mask: &WaterMask,
    seed: u64,
) -> Result<Vec<SampleLocation>> {
    let sampler = DiskSampler::new(center, r_km, mask)?;
    let mut rng = seed::rng(seed, "disk", &[city_id.as_bytes()]);
    let budget = REJECTION_BUDGET * n.max(1);
    let mut attempts = 0usize;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if attempts >= budget {
            return Err(Error::SamplingExhausted(format!(
                "city {city_id}: {} of {n} dry points after {attempts} attempts",
                out.len()
            )));
        }
        let p = sampler.draw(&mut rng);
        attempts += 1;
        if !mask.contains(p) {
            out.push(SampleLocation {
                city_id: city_id.to_string(),
                kind: LocationKind::Disk,
                lat: p.lat,
                lon: p.lon,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn validate(&self) -> Result<()> {
        LatLon::new(self.lat_min, self.lon_min).validate()?;
        LatLon::new(self.lat_max, self.lon_max).validate()?;
        if self.lat_max < self.lat_min || self.lon_max < self.lon_min {
            return Err(Error::invalid("bbox max corner lies south/west of min corner"));
        }
        Ok(())
    }

    pub fn contains(&self, p: LatLon) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat)
            && (self.lon_min..=self.lon_max).contains(&p.lon)
    }
}

impl FromStr for BBox {
    type Err = Error;
    /// `lat_min,lon_min,lat_max,lon_max`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bbox {s:?}: {e}")))?;
        if v.len() != 4 {
            return Err(Error::invalid(format!("bbox {s:?}: expected 4 numbers")));
        }
        let b = BBox {
            lat_min: v[0],
            lon_min: v[1],
            lat_max: v[2],
            lon_max: v[3],
        };
        b.validate()?;
        Ok(b)
    }
}

/// Number of grid steps that fit in `extent`, plus the anchor point.
fn axis_count(extent: f64, step: f64) -> usize {
    // tolerate round-off when the extent is an exact multiple of the step
    ((extent / step) * (1.0 + 1e-12) + 1e-12).floor() as usize + 1
}

/// Regular grid anchored at the south-west corner of `bbox`.
///
/// Rows are emitted south to north, points west to east within a row.
pub fn make_grid(
    city_id: &str,
    bbox: BBox,
    spacing_m: f64,
    mask: &WaterMask,
) -> Result<Vec<SampleLocation>> {
    if !(spacing_m.is_finite() && spacing_m > 0.0) {
        return Err(Error::invalid(format!("grid spacing must be positive, got {spacing_m}")));
    }
    bbox.validate()?;
    let lat_step = spacing_m / METRES_PER_DEGREE;
    let mean_lat = 0.5 * (bbox.lat_min + bbox.lat_max);
    let lon_step = lat_step / mean_lat.to_radians().cos().max(1e-6);
    let rows = axis_count(bbox.lat_max - bbox.lat_min, lat_step);
    let cols = axis_count(bbox.lon_max - bbox.lon_min, lon_step);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let lat = bbox.lat_min + i as f64 * lat_step;
        for j in 0..cols {
            let lon = bbox.lon_min + j as f64 * lon_step;
            let p = LatLon::new(lat, lon);
            if mask.contains(p) {
                continue;
            }
            out.push(SampleLocation {
                city_id: city_id.to_string(),
                kind: LocationKind::Grid,
                lat,
                lon,
            });
        }
    }
    Ok(out)
}

//! City colors, prediction maps and image galleries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BBox, CityRecord, LatLon};
use crate::inference::PredictionRecord;
use crate::raster::{write_atomic, RasterImage, Rgb};

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
/// Color for predictions whose city is missing from the city table.
pub const UNKNOWN_CITY: Rgb = [128, 128, 128];
pub const GUTTER: u32 = 4;
const SATURATION: f64 = 0.8;

/// `h`, `s`, `v` in [0, 1]; channels rounded to nearest.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue from longitude, value from latitude.
pub fn city_color(city: &CityRecord) -> Rgb {
    let hue = (city.lon + 180.0) / 360.0;
    let value = 0.35 + 0.60 * (city.lat + 90.0) / 180.0;
    hsv_to_rgb(hue, SATURATION, value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendRow {
    pub city_id: String,
    pub name: String,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

pub fn legend(cities: &[CityRecord]) -> Vec<LegendRow> {
    let mut rows: Vec<LegendRow> = cities
        .iter()
        .map(|c| {
            let [r, g, b] = city_color(c);
            LegendRow { city_id: c.id.clone(), name: c.name.clone(), r, g, b }
        })
        .collect();
    rows.sort_by(|a, b| a.city_id.cmp(&b.city_id));
    rows
}

pub fn write_legend(path: &Path, cities: &[CityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in legend(cities) {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCanvas {
    pub width: u32,
    pub height: u32,
    pub bbox: BBox,
    pub dot_radius: u32,
    /// Outer radius of the target-city star.
    pub marker_radius: u32,
}

impl MapCanvas {
    pub fn new(width: u32, height: u32, bbox: BBox) -> Self {
        MapCanvas { width, height, bbox, dot_radius: 3, marker_radius: 7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::invalid("canvas must be at least 2x2"));
        }
        self.bbox.validate()
    }

    /// Equirectangular placement; `None` outside the bbox.
    pub fn project(&self, p: LatLon) -> Option<(i64, i64)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let b = &self.bbox;
        let fx = (p.lon - b.lon_min) / (b.lon_max - b.lon_min);
        let fy = (b.lat_max - p.lat) / (b.lat_max - b.lat_min);
        Some(((fx * (self.width - 1) as f64).round() as i64, (fy * (self.height - 1) as f64).round() as i64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMap {
    pub image: RasterImage,
    pub dots: usize,
    pub markers: usize,
    /// Filtered records outside the bbox.
    pub skipped_outside: usize,
    /// Filtered records predicting a city absent from the table.
    pub unknown_cities: usize,
}

impl RenderedMap {
    pub fn png(&self) -> Result<Vec<u8>> {
        self.image.to_png()
    }
}

fn put(img: &mut RasterImage, x: i64, y: i64, c: Rgb) {
    if x >= 0 && y >= 0 && x < img.width() as i64 && y < img.height() as i64 {
        img.set(x as u32, y as u32, c);
    }
}

fn fill_disc(img: &mut RasterImage, cx: i64, cy: i64, r: i64, c: Rgb) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn star_vertices(cx: f64, cy: f64, outer: f64) -> Vec<(f64, f64)> {
    let inner = outer * 0.382;
    (0..10)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            let r = if i % 2 == 0 { outer } else { inner };
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
    }
    c
}

fn fill_star(img: &mut RasterImage, cx: i64, cy: i64, r: i64, c: Rgb) {
    let poly = star_vertices(cx as f64, cy as f64, r as f64);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if inside(&poly, x as f64, y as f64) {
                put(img, x, y, c);
            }
        }
    }
}

/// White canvas with one dot per filtered record, colored by predicted
/// city, and a black star over every filtered match of `target`.
pub fn render_prediction_map(
    records: &[PredictionRecord],
    cities: &[CityRecord],
    canvas: &MapCanvas,
    target: Option<&str>,
) -> Result<RenderedMap> {
    canvas.validate()?;
    let colors: BTreeMap<&str, Rgb> = cities.iter().map(|c| (c.id.as_str(), city_color(c))).collect();
    let mut img = RasterImage::filled(canvas.width, canvas.height, WHITE);
    let mut out = RenderedMap { image: RasterImage::filled(1, 1, WHITE), dots: 0, markers: 0, skipped_outside: 0, unknown_cities: 0 };
    let mut stars = Vec::new();
    for r in records.iter().filter(|r| r.passes_filter) {
        let Some((x, y)) = canvas.project(LatLon::new(r.lat, r.lon)) else {
            out.skipped_outside += 1;
            continue;
        };
        let color = colors.get(r.predicted_city_id.as_str()).copied().unwrap_or_else(|| {
            out.unknown_cities += 1;
            UNKNOWN_CITY
        });
        fill_disc(&mut img, x, y, canvas.dot_radius as i64, color);
        out.dots += 1;
        if target == Some(r.predicted_city_id.as_str()) {
            stars.push((x, y));
        }
    }
    for (x, y) in stars {
        fill_star(&mut img, x, y, canvas.marker_radius as i64, BLACK);
        out.markers += 1;
    }
    if out.skipped_outside > 0 {
        log::warn!("{} filtered records fall outside the map bbox", out.skipped_outside);
    }
    out.image = img;
    Ok(out)
}

/// Row-major montage with a white gutter around every cell.
pub fn render_gallery(images: &[RasterImage], columns: u32) -> Result<RasterImage> {
    let first = images.first().ok_or_else(|| Error::invalid("gallery needs at least one image"))?;
    if columns == 0 {
        return Err(Error::invalid("gallery needs at least one column"));
    }
    let (w, h) = (first.width(), first.height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Error::invalid("gallery images must share one size"));
    }
    let cols = columns.min(images.len() as u32);
    let rows = (images.len() as u32).div_ceil(cols);
    let mut out = RasterImage::filled(cols * w + (cols + 1) * GUTTER, rows * h + (rows + 1) * GUTTER, WHITE);
    for (i, img) in images.iter().enumerate() {
        let (ox, oy) = gallery_offset(i, cols, w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    Ok(out)
}

/// Top-left pixel of gallery cell `i`.
pub fn gallery_offset(i: usize, columns: u32, w: u32, h: u32) -> (u32, u32) {
    let (r, c) = (i as u32 / columns, i as u32 % columns);
    (GUTTER + c * (w + GUTTER), GUTTER + r * (h + GUTTER))
}

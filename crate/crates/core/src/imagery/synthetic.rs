//! Offline procedural imagery.
//!
//! A [`StyleSpec`] describes a city's look: road grid spacing and angle,
//! green and water coverage, transit density and a palette. Tiles are laid
//! out in world metres, so neighbouring locations see a continuous street
//! grid. Green and water coverage are placed by ranking a value-noise field
//! and taking the requested share of pixels, which pins the per-tile
//! fractions exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageryProvider, ImageryRequest, Source};
use crate::error::{Error, Result};
use crate::geo::SampleLocation;
use crate::raster::{RasterImage, Rgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub road: Rgb,
    pub transit: Rgb,
    pub green: Rgb,
    pub water: Rgb,
    pub background: Rgb,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            road: [0, 0, 0],
            transit: [255, 140, 0],
            green: [110, 190, 100],
            water: [90, 150, 225],
            background: [255, 255, 255],
        }
    }
}

impl Palette {
    fn colors(&self) -> [Rgb; 5] {
        [self.road, self.transit, self.green, self.water, self.background]
    }
}

fn default_coverage() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: String,
    pub block_size_m: f64,
    pub road_angle: f64,
    pub green_fraction: f64,
    pub water_fraction: f64,
    pub transit_density: f64,
    #[serde(default)]
    pub palette: Palette,
    /// Share of locations with street-level imagery.
    #[serde(default = "default_coverage")]
    pub streetview_coverage: f64,
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("green_fraction", self.green_fraction),
            ("water_fraction", self.water_fraction),
            ("transit_density", self.transit_density),
            ("streetview_coverage", self.streetview_coverage),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("style {}: {name} = {v} outside [0, 1]", self.style_id)));
            }
        }
        if !(self.block_size_m.is_finite() && self.block_size_m > 0.0) {
            return Err(Error::invalid(format!("style {}: block size must be positive", self.style_id)));
        }
        if !self.road_angle.is_finite() {
            return Err(Error::invalid(format!("style {}: road angle must be finite", self.style_id)));
        }
        let colors = self.palette.colors();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                if colors[i] == colors[j] {
                    return Err(Error::invalid(format!(
                        "style {}: palette colors must be distinct",
                        self.style_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// JSON file binding styles to cities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StylesFile {
    pub styles: Vec<StyleSpec>,
    /// city id -> style id. Cities without an entry use the style whose id
    /// equals the city id.
    #[serde(default)]
    pub assignments: BTreeMap<String, String>,
}

impl StylesFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: StylesFile = serde_json::from_str(&text)?;
        for s in &f.styles {
            s.validate()?;
        }
        Ok(f)
    }
}

pub struct SyntheticProvider {
    styles: BTreeMap<String, StyleSpec>,
    assignments: BTreeMap<String, String>,
    seed: u64,
    fingerprint: String,
}

impl SyntheticProvider {
    pub fn new(file: StylesFile, seed: u64) -> Result<Self> {
        for s in &file.styles {
            s.validate()?;
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&file)?);
        h.update(seed.to_le_bytes());
        let fingerprint = format!("synthetic:{}", hex::encode(h.finalize()));
        let styles = file
            .styles
            .into_iter()
            .map(|s| (s.style_id.clone(), s))
            .collect::<BTreeMap<_, _>>();
        for (city, style) in &file.assignments {
            if !styles.contains_key(style) {
                return Err(Error::invalid(format!("city {city} assigned to unknown style {style}")));
            }
        }
        Ok(SyntheticProvider {
            styles,
            assignments: file.assignments,
            seed,
            fingerprint,
        })
    }

    pub fn style_for(&self, city_id: &str) -> Option<&StyleSpec> {
        let id = self.assignments.get(city_id).map(String::as_str).unwrap_or(city_id);
        self.styles.get(id)
    }

    fn has_streetview(&self, style: &StyleSpec, loc: &SampleLocation) -> bool {
        style.streetview_coverage >= 1.0
            || unit_hash(&[self.seed, loc.lat.to_bits(), loc.lon.to_bits(), 0x5eed])
                < style.streetview_coverage
    }
}

impl ImageryProvider for SyntheticProvider {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn fetch(&self, request: &ImageryRequest) -> Result<RasterImage> {
        let style = self.style_for(&request.location.city_id).ok_or_else(|| {
            Error::invalid(format!("no synthetic style for city {}", request.location.city_id))
        })?;
        if request.source == Source::Streetview && !self.has_streetview(style, &request.location) {
            return Err(Error::NoImagery {
                lat: request.location.lat,
                lon: request.location.lon,
            });
        }
        Ok(render_request(style, request, self.seed))
    }
}

/// `n` styles with well-separated palettes and layouts, for benchmarks
/// and demos.
pub fn benchmark_styles(n: usize) -> Vec<StyleSpec> {
    use crate::rendering::hsv_to_rgb;
    (0..n)
        .map(|i| {
            let h = i as f64 / n.max(1) as f64;
            StyleSpec {
                style_id: format!("style{i:02}"),
                block_size_m: 60.0 + 17.0 * (i % 7) as f64,
                road_angle: 9.0 * i as f64,
                green_fraction: 0.08 + 0.04 * (i % 5) as f64,
                water_fraction: 0.03 * (i % 4) as f64,
                transit_density: 0.1 + 0.1 * (i % 3) as f64,
                palette: Palette {
                    road: hsv_to_rgb(h + 0.5, 0.5, 0.25),
                    transit: hsv_to_rgb(h + 0.25, 0.9, 0.95),
                    green: hsv_to_rgb(0.3 + 0.1 * h, 0.5, 0.7),
                    water: hsv_to_rgb(0.58 + 0.06 * h, 0.6, 0.85),
                    background: hsv_to_rgb(h, 0.3, 0.97),
                },
                streetview_coverage: 1.0,
            }
        })
        .collect()
}

/// Renders a default-size (256x256, zoom 16) tile.
pub fn synth_city_image(
    style: &StyleSpec,
    location: &SampleLocation,
    source: Source,
    seed: u64,
) -> RasterImage {
    render_request(style, &ImageryRequest::new(location.clone(), source), seed)
}

pub fn render_request(style: &StyleSpec, request: &ImageryRequest, seed: u64) -> RasterImage {
    let style_key = str_hash(&style.style_id);
    let seed = mix(seed, style_key);
    match request.source {
        Source::Map => {
            let layout = Layout::new(style, request, seed);
            render_map(style, &layout)
        }
        Source::Satellite => {
            let layout = Layout::new(style, request, seed);
            render_satellite(style, &layout, seed)
        }
        Source::Streetview => render_streetview(style, request, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cover {
    Background,
    Road,
    Transit,
    Green,
    Water,
}

struct Layout {
    width: u32,
    height: u32,
    cover: Vec<Cover>,
    /// Street-block cell of every pixel, for per-block texture.
    cell: Vec<(i64, i64)>,
}

/// Ground resolution of a web-mercator tile pixel at 256 px per tile.
fn metres_per_pixel(lat: f64, zoom: u32) -> f64 {
    156_543.033_92 * lat.to_radians().cos() / 2f64.powi(zoom as i32)
}

impl Layout {
    fn new(style: &StyleSpec, req: &ImageryRequest, seed: u64) -> Layout {
        let (w, h) = (req.width, req.height);
        let n = w as usize * h as usize;
        // same ground footprint as a 256 px tile, whatever the pixel size
        let extent = DEFAULT_TILE_PX * metres_per_pixel(req.location.lat, req.zoom);
        let m = extent / w as f64;
        let cx = req.location.lon * 111_320.0 * req.location.lat.to_radians().cos();
        let cy = req.location.lat * 111_320.0;
        let (sa, ca) = style.road_angle.to_radians().sin_cos();
        let block = style.block_size_m;

        let mut cover = vec![Cover::Background; n];
        let mut cell = vec![(0, 0); n];
        let mut water_noise = vec![0.0; n];
        let mut green_noise = vec![0.0; n];
        let noise_scale = 1.5 * block;
        for py in 0..h {
            for px in 0..w {
                let i = (py * w + px) as usize;
                let e = cx + (px as f64 + 0.5 - w as f64 / 2.0) * m;
                let nn = cy - (py as f64 + 0.5 - h as f64 / 2.0) * m;
                let u = e * ca + nn * sa;
                let v = -e * sa + nn * ca;
                let (du, ku, cu) = line_distance(u, block);
                let (dv, kv, cv) = line_distance(v, block);
                cell[i] = (cu, cv);
                let on_transit = |k: i64, axis: u64| {
                    style.transit_density > 0.0
                        && unit_hash(&[seed, axis, k as u64, 0x7a]) < style.transit_density
                };
                if (du < TRANSIT_HALF_WIDTH_M && on_transit(ku, 1))
                    || (dv < TRANSIT_HALF_WIDTH_M && on_transit(kv, 2))
                {
                    cover[i] = Cover::Transit;
                } else if du < road_half_width(ku) || dv < road_half_width(kv) {
                    cover[i] = Cover::Road;
                }
                water_noise[i] = value_noise(e, nn, noise_scale, mix(seed, 0xa7e2));
                green_noise[i] = value_noise(e, nn, noise_scale * 0.7, mix(seed, 0x62ee));
            }
        }

        let want_water = (style.water_fraction * n as f64).round() as usize;
        let all: Vec<usize> = (0..n).collect();
        for i in top_k(&all, &water_noise, want_water) {
            cover[i] = Cover::Water;
        }
        let want_green = (style.green_fraction * n as f64).round() as usize;
        let open: Vec<usize> = (0..n).filter(|&i| cover[i] == Cover::Background).collect();
        for i in top_k(&open, &green_noise, want_green) {
            cover[i] = Cover::Green;
        }
        Layout { width: w, height: h, cover, cell }
    }
}

const DEFAULT_TILE_PX: f64 = 256.0;
const TRANSIT_HALF_WIDTH_M: f64 = 3.0;

fn road_half_width(line: i64) -> f64 {
    // every fourth line is an arterial
    if line.rem_euclid(4) == 0 {
        8.0
    } else {
        4.0
    }
}

/// Distance to the nearest grid line, that line's index, and the cell index.
fn line_distance(x: f64, spacing: f64) -> (f64, i64, i64) {
    let k = (x / spacing).floor();
    let off = x - k * spacing;
    if off < spacing / 2.0 {
        (off, k as i64, k as i64)
    } else {
        (spacing - off, k as i64 + 1, k as i64)
    }
}

/// The `k` indices of `candidates` with the largest `score`, ties by index.
fn top_k(candidates: &[usize], score: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    let mut v = candidates.to_vec();
    let cmp = |a: &usize, b: &usize| score[*b].total_cmp(&score[*a]).then(a.cmp(b));
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, cmp);
        v.truncate(k);
    }
    v
}

fn render_map(style: &StyleSpec, layout: &Layout) -> RasterImage {
    let p = &style.palette;
    let mut px = Vec::with_capacity(layout.cover.len() * 3);
    for c in &layout.cover {
        px.extend_from_slice(&match c {
            Cover::Background => p.background,
            Cover::Road => p.road,
            Cover::Transit => p.transit,
            Cover::Green => p.green,
            Cover::Water => p.water,
        });
    }
    RasterImage::new(layout.width, layout.height, px).expect("layout dimensions")
}

fn render_satellite(style: &StyleSpec, layout: &Layout, seed: u64) -> RasterImage {
    let p = &style.palette;
    let roof_tones: [Rgb; 3] = [[168, 92, 70], [140, 140, 136], [196, 180, 150]];
    let mut px = Vec::with_capacity(layout.cover.len() * 3);
    for (i, c) in layout.cover.iter().enumerate() {
        let jitter = unit_hash(&[seed, i as u64, 0x51]) - 0.5;
        let color = match c {
            Cover::Water => shade(scale(p.water, 0.55), jitter * 10.0),
            Cover::Green => shade(scale(p.green, 0.6), jitter * 36.0),
            Cover::Road => shade([118, 118, 112], jitter * 14.0),
            Cover::Transit => shade(blend([120, 105, 95], p.transit, 0.25), jitter * 12.0),
            Cover::Background => {
                let (cu, cv) = layout.cell[i];
                let h = unit_hash(&[seed, cu as u64, cv as u64, 0x700f]);
                let tone = roof_tones[(h * 3.0) as usize % 3];
                shade(blend(scale(p.background, 0.75), tone, 0.55), jitter * 20.0)
            }
        };
        px.extend_from_slice(&color);
    }
    RasterImage::new(layout.width, layout.height, px).expect("layout dimensions")
}

fn render_streetview(style: &StyleSpec, req: &ImageryRequest, seed: u64) -> RasterImage {
    let (w, h) = (req.width as usize, req.height as usize);
    let (wf, hf) = (w as f64, h as f64);
    let p = &style.palette;
    let loc_key = mix(req.location.lat.to_bits(), req.location.lon.to_bits());
    let view = mix(mix(seed, loc_key), req.heading as u64);
    let horizon = (0.55 * hf) as usize;

    // sky
    let mut img = vec![[0u8; 3]; w * h];
    for y in 0..h {
        let t = y as f64 / hf;
        let sky = blend([120, 175, 230], [205, 225, 245], t / 0.55);
        for x in 0..w {
            img[y * w + x] = sky;
        }
    }

    // building facades along the horizon; block size sets their width
    let mut x = 0usize;
    let mut b = 0u64;
    while x < w {
        let r = unit_hash(&[view, b, 1]);
        let bw = ((style.block_size_m / 400.0 * wf) * (0.5 + r)).max(3.0) as usize;
        let top = (hf * (0.12 + 0.3 * unit_hash(&[view, b, 2]))) as usize;
        let facade = scale(p.background, 0.55 + 0.35 * unit_hash(&[view, b, 3]));
        let window = scale(facade, 0.55);
        for xx in x..(x + bw).min(w) {
            for yy in top..horizon {
                let in_window = (xx - x) % 6 >= 2 && (yy - top) % 8 >= 3 && xx + 1 < x + bw;
                img[yy * w + xx] = if in_window { window } else { facade };
            }
        }
        x += bw;
        b += 1;
    }

    // street, sidewalks, lane markings
    let asphalt = if style.water_fraction > 0.5 { scale(p.water, 0.7) } else { [82, 82, 88] };
    for y in horizon..h {
        let depth = (y - horizon) as f64 / (hf - horizon as f64).max(1.0);
        let half = 0.08 * wf + depth * 0.5 * wf;
        for x in 0..w {
            let dx = (x as f64 + 0.5 - wf / 2.0).abs();
            img[y * w + x] = if dx < half {
                if dx < 0.01 * wf + 1.0 && ((depth * 12.0) as u64).is_multiple_of(2) {
                    [235, 225, 170]
                } else {
                    asphalt
                }
            } else {
                [170, 168, 160]
            };
        }
    }

    // trees
    let trees = (style.green_fraction * 10.0).round() as u64;
    for t in 0..trees {
        let tx = unit_hash(&[view, t, 10]) * wf;
        let ty = horizon as f64 - hf * 0.08 * unit_hash(&[view, t, 11]);
        let rad = hf * (0.08 + 0.1 * unit_hash(&[view, t, 12]));
        let leaf = scale(p.green, 0.55 + 0.3 * unit_hash(&[view, t, 13]));
        fill_disc(&mut img, w, h, tx, ty, rad, leaf);
    }

    // overhead tram line
    if style.transit_density > 0.3 {
        let y0 = (0.2 * hf) as usize;
        for x in 0..w {
            img[y0 * w + x] = [40, 40, 40];
        }
        let y1 = horizon.saturating_sub(2);
        let (x0, x1) = ((0.3 * wf) as usize, (0.7 * wf) as usize);
        for yy in y1.saturating_sub((0.05 * hf) as usize)..y1 {
            for xx in x0..x1 {
                img[yy * w + xx] = p.transit;
            }
        }
    }

    let mut px = Vec::with_capacity(w * h * 3);
    for (i, c) in img.iter().enumerate() {
        let j = (unit_hash(&[view, i as u64, 0x99]) - 0.5) * 8.0;
        px.extend_from_slice(&shade(*c, j));
    }
    RasterImage::new(req.width, req.height, px).expect("request dimensions")
}

fn fill_disc(img: &mut [Rgb], w: usize, h: usize, cx: f64, cy: f64, r: f64, c: Rgb) {
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img[y * w + x] = c;
            }
        }
    }
}

fn scale(c: Rgb, f: f64) -> Rgb {
    c.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

fn shade(c: Rgb, delta: f64) -> Rgb {
    c.map(|v| (v as f64 + delta).round().clamp(0.0, 255.0) as u8)
}

fn blend(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    [0, 1, 2].map(|k| (a[k] as f64 * (1.0 - t) + b[k] as f64 * t).round() as u8)
}

// splitmix64 finalizer
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_hash(parts: &[u64]) -> f64 {
    let h = parts.iter().fold(0x243f_6a88_85a3_08d3u64, |acc, p| mix(acc, *p));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn str_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Two-octave smoothed lattice noise in world metres.
fn value_noise(x: f64, y: f64, scale: f64, seed: u64) -> f64 {
    lattice(x / scale, y / scale, seed) + 0.5 * lattice(2.0 * x / scale, 2.0 * y / scale, mix(seed, 1))
}

fn lattice(x: f64, y: f64, seed: u64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (x - xi, y - yi);
    let (xi, yi) = (xi as i64 as u64, yi as i64 as u64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let g = |a: u64, b: u64| unit_hash(&[seed, a, b]);
    let top = g(xi, yi) + s(fx) * (g(xi.wrapping_add(1), yi) - g(xi, yi));
    let bot = g(xi, yi.wrapping_add(1))
        + s(fx) * (g(xi.wrapping_add(1), yi.wrapping_add(1)) - g(xi, yi.wrapping_add(1)));
    top + s(fy) * (bot - top)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocationKind;
    use crate::imagery::{quality_check, Quality};

    fn style() -> StyleSpec {
        StyleSpec {
            style_id: "test".into(),
            block_size_m: 120.0,
            road_angle: 20.0,
            green_fraction: 0.3,
            water_fraction: 0.1,
            transit_density: 0.2,
            palette: Palette::default(),
            streetview_coverage: 1.0,
        }
    }

    fn loc() -> SampleLocation {
        SampleLocation { city_id: "c".into(), kind: LocationKind::Disk, lat: -37.81, lon: 144.96 }
    }

    fn share(img: &RasterImage, c: Rgb) -> f64 {
        img.iter_rgb().filter(|p| *p == c).count() as f64 / img.pixel_count() as f64
    }

    #[test]
    fn deterministic_tiles() {
        for src in Source::ALL {
            let a = synth_city_image(&style(), &loc(), src, 5);
            let b = synth_city_image(&style(), &loc(), src, 5);
            assert_eq!(a, b);
            assert_eq!((a.width(), a.height()), (256, 256));
        }
    }

    #[test]
    fn green_share_matches_style() {
        let img = synth_city_image(&style(), &loc(), Source::Map, 1);
        let g = share(&img, Palette::default().green);
        assert!((0.25..=0.35).contains(&g), "green share {g}");
        let w = share(&img, Palette::default().water);
        assert!((w - 0.1).abs() < 0.005, "water share {w}");
    }

    #[test]
    fn no_green_means_no_green_pixels() {
        let mut s = style();
        s.green_fraction = 0.0;
        for src in Source::ALL {
            let img = synth_city_image(&s, &loc(), src, 1);
            assert_eq!(share(&img, s.palette.green), 0.0, "{src}");
        }
    }

    #[test]
    fn all_water_is_uniform() {
        let mut s = style();
        s.water_fraction = 1.0;
        let img = synth_city_image(&s, &loc(), Source::Map, 1);
        assert!(img.iter_rgb().all(|c| c == s.palette.water));
    }

    #[test]
    fn sources_look_different_and_usable() {
        let imgs: Vec<_> = Source::ALL
            .iter()
            .map(|s| synth_city_image(&style(), &loc(), *s, 3))
            .collect();
        assert_ne!(imgs[0], imgs[1]);
        assert_ne!(imgs[1], imgs[2]);
        for img in &imgs {
            assert_eq!(quality_check(img), Quality::Ok);
        }
    }

    #[test]
    fn heading_changes_streetview() {
        let req = ImageryRequest::new(loc(), Source::Streetview);
        let a = render_request(&style(), &req.clone().with_heading(10), 1);
        let b = render_request(&style(), &req.with_heading(200), 1);
        assert_ne!(a, b);
    }

    #[test]
    fn small_tiles_cover_same_ground() {
        let req = ImageryRequest::new(loc(), Source::Map).with_size(64, 64);
        let img = render_request(&style(), &req, 1);
        assert_eq!(img.pixel_count(), 64 * 64);
        let g = share(&img, Palette::default().green);
        assert!((g - 0.3).abs() < 0.01);
    }

    #[test]
    fn style_validation() {
        let mut s = style();
        s.green_fraction = 1.2;
        assert!(s.validate().is_err());
        let mut s = style();
        s.palette.green = s.palette.water;
        assert!(s.validate().is_err());
    }

    #[test]
    fn provider_coverage_and_lookup() {
        let mut s = style();
        s.streetview_coverage = 0.0;
        let file = StylesFile {
            styles: vec![s],
            assignments: [("c".to_string(), "test".to_string())].into_iter().collect(),
        };
        let p = SyntheticProvider::new(file, 0).unwrap();
        let req = ImageryRequest::new(loc(), Source::Streetview);
        assert!(matches!(p.fetch(&req), Err(Error::NoImagery { .. })));
        let req = ImageryRequest::new(loc(), Source::Map);
        assert!(p.fetch(&req).is_ok());
        let mut other = loc();
        other.city_id = "unknown".into();
        assert!(p.fetch(&ImageryRequest::new(other, Source::Map)).is_err());
    }
}

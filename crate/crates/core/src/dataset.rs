//! Train/validation manifests and preprocessing into normalized batches.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::CityRecord;
use crate::raster::{write_atomic, RasterImage};
use crate::seed;

pub const DEFAULT_VAL_FRACTION: f64 = 0.25;
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Name of the per-city sidecar listing image files and their provenance.
pub const IMAGE_INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One row of a city image directory's `index.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageIndexRow {
    pub file: String,
    pub lat: f64,
    pub lon: f64,
    pub source: String,
    pub heading: u16,
}

pub fn write_image_index(dir: &Path, rows: &[ImageIndexRow]) -> Result<()> {
    let path = dir.join(IMAGE_INDEX_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
    write_atomic(&path, &bytes)
}

pub fn read_image_index(dir: &Path) -> Result<Vec<ImageIndexRow>> {
    let mut rdr = csv::Reader::from_path(dir.join(IMAGE_INDEX_FILE))?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub city_id: String,
    pub city_name: String,
    pub lat: f64,
    pub lon: f64,
    pub source: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    /// city id -> contiguous class label, ordered by city id.
    pub class_index: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Class ids ordered by label.
    pub fn classes(&self) -> Vec<String> {
        let mut v: Vec<(usize, String)> =
            self.class_index.iter().map(|(k, v)| (*v, k.clone())).collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }

    pub fn label(&self, row: &ManifestRow) -> Result<usize> {
        self.class_index
            .get(&row.city_id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("city {} missing from class index", row.city_id)))
    }

    pub fn rows_in(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut labels: Vec<usize> = self.class_index.values().copied().collect();
        labels.sort_unstable();
        if labels.iter().enumerate().any(|(i, l)| i != *l) {
            return Err(Error::invalid("class labels must be contiguous from 0"));
        }
        for r in &self.rows {
            self.label(r)?;
        }
        Ok(())
    }

    /// Manifest CSV bytes (`image_path,city_id,city_name,lat,lon,source,split`).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::io("<manifest>", e.into_error()))
    }

    pub fn class_index_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(&self.class_index)?;
        v.push(b'\n');
        Ok(v)
    }

    /// Writes the manifest and `class_index.json` next to it.
    pub fn save(&self, manifest_path: &Path) -> Result<PathBuf> {
        write_atomic(manifest_path, &self.to_csv()?)?;
        let ci = class_index_path(manifest_path);
        write_atomic(&ci, &self.class_index_json()?)?;
        Ok(ci)
    }

    /// Rewrites image paths under `root` as paths relative to it.
    pub fn relativize_paths(&mut self, root: &Path) {
        for r in &mut self.rows {
            if let Ok(rel) = Path::new(&r.image_path).strip_prefix(root) {
                r.image_path = rel.to_string_lossy().into_owned();
            }
        }
    }

    /// Joins relative image paths onto `root`.
    pub fn resolve_paths(&mut self, root: &Path) {
        for r in &mut self.rows {
            if Path::new(&r.image_path).is_relative() {
                r.image_path = root.join(&r.image_path).to_string_lossy().into_owned();
            }
        }
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(manifest_path)?;
        let rows = rdr
            .deserialize()
            .map(|r| r.map_err(Error::from))
            .collect::<Result<Vec<ManifestRow>>>()?;
        let ci = class_index_path(manifest_path);
        let text = std::fs::read_to_string(&ci).map_err(|e| Error::io(&ci, e))?;
        let class_index: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        let m = DatasetManifest { rows, class_index };
        m.validate()?;
        Ok(m)
    }
}

pub fn class_index_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_file_name("class_index.json")
}

struct CityImage {
    path: String,
    lat: f64,
    lon: f64,
    source: String,
}

fn city_images(dir: &Path, city: &CityRecord, source_hint: &str) -> Result<Vec<CityImage>> {
    if dir.join(IMAGE_INDEX_FILE).exists() {
        let rows = read_image_index(dir)?;
        return Ok(rows
            .into_iter()
            .map(|r| CityImage {
                path: dir.join(&r.file).to_string_lossy().into_owned(),
                lat: r.lat,
                lon: r.lon,
                source: r.source,
            })
            .collect());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| CityImage {
            path: p.to_string_lossy().into_owned(),
            lat: city.lat,
            lon: city.lon,
            source: source_hint.to_string(),
        })
        .collect())
}

/// Builds a manifest from `<image_dir>/<city_id>/` directories.
///
/// Each city's images are shuffled with a seed derived from the city id and
/// `floor(val_fraction * n)` of them go to validation.
pub fn build_manifest(
    image_dirs: &[PathBuf],
    cities: &[CityRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let mut sorted: Vec<&CityRecord> = cities.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.dedup_by(|a, b| a.id == b.id);

    let mut missing = Vec::new();
    let mut too_few = Vec::new();
    let mut rows = Vec::new();
    for city in &sorted {
        let mut images = Vec::new();
        let mut found = false;
        for dir in image_dirs {
            let d = dir.join(&city.id);
            if d.is_dir() {
                found = true;
                let hint = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                images.extend(city_images(&d, city, &hint)?);
            }
        }
        if !found {
            missing.push(city.id.clone());
            continue;
        }
        if images.len() < 4 {
            too_few.push(format!("{} ({} images)", city.id, images.len()));
            continue;
        }
        images.sort_by(|a, b| a.path.cmp(&b.path));
        let mut rng = seed::rng(seed, "split", &[city.id.as_bytes()]);
        images.shuffle(&mut rng);
        let n_val = (val_fraction * images.len() as f64).floor() as usize;
        for (i, img) in images.into_iter().enumerate() {
            rows.push(ManifestRow {
                image_path: img.path,
                city_id: city.id.clone(),
                city_name: city.name.clone(),
                lat: img.lat,
                lon: img.lon,
                source: img.source,
                split: if i < n_val { Split::Val } else { Split::Train },
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::ManifestBuild(format!("missing image directory for: {}", missing.join(", "))));
    }
    if !too_few.is_empty() {
        return Err(Error::ManifestBuild(format!("need at least 4 images per city: {}", too_few.join(", "))));
    }
    let class_index = sorted
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.clone(), i))
        .collect();
    Ok(DatasetManifest { rows, class_index })
}

/// Dense `(N, H, W, C)` float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }
}

#[inline]
pub fn normalize_value(v: u8) -> f32 {
    (v as f32 - 128.0) / 128.0
}

#[inline]
pub fn denormalize_value(v: f32) -> u8 {
    (v * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8
}

/// `(v - 128) / 128` per channel, as a single-image tensor.
pub fn normalize(img: &RasterImage) -> Tensor {
    Tensor {
        shape: [1, img.height() as usize, img.width() as usize, 3],
        data: img.pixels().iter().map(|&v| normalize_value(v)).collect(),
    }
}

fn check_crop(img: &RasterImage, out: u32) -> Result<()> {
    if img.width() < out || img.height() < out {
        return Err(Error::invalid(format!(
            "cannot crop {out}x{out} from {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Random `out`x`out` window; returns the crop and its `(dy, dx)` offset.
pub fn random_crop_with(img: &RasterImage, out: u32, rng: &mut seed::Rng) -> Result<(RasterImage, (u32, u32))> {
    check_crop(img, out)?;
    let dy = rng.random_range(0..=img.height() - out);
    let dx = rng.random_range(0..=img.width() - out);
    Ok((img.crop(dx, dy, out, out)?, (dy, dx)))
}

pub fn random_crop(img: &RasterImage, out: u32, seed: u64) -> Result<(RasterImage, (u32, u32))> {
    random_crop_with(img, out, &mut seed::rng(seed, "crop", &[]))
}

pub fn center_crop(img: &RasterImage, out: u32) -> Result<(RasterImage, (u32, u32))> {
    check_crop(img, out)?;
    let dy = (img.height() - out) / 2;
    let dx = (img.width() - out) / 2;
    Ok((img.crop(dx, dy, out, out)?, (dy, dx)))
}

pub trait ImageLoader: Sync {
    fn load(&self, path: &str) -> Result<RasterImage>;
}

/// Decodes from disk on every call.
pub struct DiskLoader;

impl ImageLoader for DiskLoader {
    fn load(&self, path: &str) -> Result<RasterImage> {
        RasterImage::load(Path::new(path))
    }
}

/// Decodes each file once and keeps it in memory.
#[derive(Default)]
pub struct CachingLoader {
    cache: Mutex<HashMap<String, RasterImage>>,
}

impl ImageLoader for CachingLoader {
    fn load(&self, path: &str) -> Result<RasterImage> {
        if let Some(img) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(path) {
            return Ok(img.clone());
        }
        let img = RasterImage::load(Path::new(path))?;
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(path.to_string(), img.clone());
        Ok(img)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Indices of the batch rows in the manifest.
    pub rows: Vec<usize>,
}

/// Manifest row order for one epoch: train rows shuffled by `(seed, epoch)`,
/// validation rows in manifest order.
pub fn epoch_order(manifest: &DatasetManifest, split: Split, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = manifest
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if split == Split::Train {
        let mut rng = seed::rng(seed, "batches", &[&(epoch as u64).to_le_bytes()]);
        idx.shuffle(&mut rng);
    }
    idx
}

/// Streams normalized batches. Train rows get random crops, validation
/// rows center crops. The final short batch is kept.
pub struct Batches<'a, L: ImageLoader + ?Sized> {
    manifest: &'a DatasetManifest,
    loader: &'a L,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    crop: u32,
    split: Split,
    seed: u64,
    epoch: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn batches<'a, L: ImageLoader + ?Sized>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    crop: u32,
    loader: &'a L,
) -> Result<Batches<'a, L>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(Batches {
        manifest,
        loader,
        order: epoch_order(manifest, split, seed, epoch),
        pos: 0,
        batch_size,
        crop,
        split,
        seed,
        epoch,
    })
}

impl<L: ImageLoader + ?Sized> Batches<'_, L> {
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn build(&self, rows: &[usize]) -> Result<Batch> {
        use rayon::prelude::*;
        let c = self.crop as usize;
        let per = c * c * 3;
        let crops = rows
            .par_iter()
            .map(|&i| {
                let row = &self.manifest.rows[i];
                let img = self.loader.load(&row.image_path)?;
                let (crop, _) = match self.split {
                    Split::Train => {
                        let mut rng = seed::rng(
                            self.seed,
                            "crop",
                            &[&(self.epoch as u64).to_le_bytes(), &(i as u64).to_le_bytes()],
                        );
                        random_crop_with(&img, self.crop, &mut rng)?
                    }
                    Split::Val => center_crop(&img, self.crop)?,
                };
                Ok((crop, self.manifest.label(row)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut inputs = Tensor::zeros([rows.len(), c, c, 3]);
        let mut labels = Vec::with_capacity(rows.len());
        for (k, (crop, label)) in crops.into_iter().enumerate() {
            for (dst, &v) in inputs.data[k * per..(k + 1) * per].iter_mut().zip(crop.pixels()) {
                *dst = normalize_value(v);
            }
            labels.push(label);
        }
        Ok(Batch { inputs, labels, rows: rows.to_vec() })
    }
}

impl<L: ImageLoader + ?Sized> Iterator for Batches<'_, L> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build(&rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_anchors() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(128), 0.0);
        assert_eq!(normalize_value(255), 0.9921875);
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
            assert!(normalize_value(v).abs() <= 1.0);
        }
    }

    #[test]
    fn center_crop_offsets() {
        let mut img = RasterImage::filled(256, 256, [0, 0, 0]);
        img.set(16, 16, [255, 1, 2]);
        let (c, off) = center_crop(&img, 224).unwrap();
        assert_eq!(off, (16, 16));
        assert_eq!(c.get(0, 0), [255, 1, 2]);
        let (same, off) = center_crop(&c, 224).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(same, c);
        assert!(center_crop(&RasterImage::filled(100, 300, [0; 3]), 224).is_err());
    }

    #[test]
    fn random_crop_is_a_subwindow() {
        let px: Vec<u8> = (0..256 * 256 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let img = RasterImage::new(256, 256, px).unwrap();
        let (a, off_a) = random_crop(&img, 224, 5).unwrap();
        let (b, off_b) = random_crop(&img, 224, 5).unwrap();
        assert_eq!(off_a, off_b);
        assert_eq!(a, b);
        let (dy, dx) = off_a;
        assert!(dy <= 32 && dx <= 32);
        for y in 0..224 {
            for x in 0..224 {
                assert_eq!(a.get(x, y), img.get(x + dx, y + dy));
            }
        }
        assert!(random_crop(&RasterImage::filled(200, 256, [0; 3]), 224, 1).is_err());
    }
}

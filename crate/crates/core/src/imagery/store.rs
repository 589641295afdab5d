//! Per-city image directories: numbered PNGs plus an `index.csv` sidecar.

use std::path::Path;

use super::ImageryRequest;
use crate::dataset::{read_image_index, write_image_index, ImageIndexRow};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Writes `00000.png, 00001.png, ...` and the index, replacing any
/// previous index in `dir`.
pub fn write_city_images(dir: &Path, items: &[(ImageryRequest, RasterImage)]) -> Result<Vec<ImageIndexRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(items.len());
    for (i, (req, img)) in items.iter().enumerate() {
        let file = format!("{i:05}.png");
        img.save_png(&dir.join(&file))?;
        rows.push(ImageIndexRow {
            file,
            lat: req.location.lat,
            lon: req.location.lon,
            source: req.source.to_string(),
            heading: req.heading,
        });
    }
    write_image_index(dir, &rows)?;
    Ok(rows)
}

/// Images listed in `dir/index.csv`, in index order.
pub fn read_city_images(dir: &Path) -> Result<Vec<(ImageIndexRow, RasterImage)>> {
    read_image_index(dir)?
        .into_iter()
        .map(|r| {
            let img = RasterImage::load(&dir.join(&r.file))?;
            Ok((r, img))
        })
        .collect()
}

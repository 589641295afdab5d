//! Predictions over evaluation locations and the aggregate likeness tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::center_crop;
use crate::error::{Error, Result};
use crate::geo::{CityRecord, SampleLocation};
use crate::network::{top_k, Activations, Network};
use crate::raster::{write_atomic, RasterImage};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub lat: f64,
    pub lon: f64,
    pub predicted_city_id: String,
    pub probability: f64,
    pub passes_filter: bool,
}

/// Percentage held as an exact count of hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent {
    pub hundredths: u64,
}

impl Percent {
    /// `100 * num / den` rounded half-up to two decimals.
    pub fn ratio(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::UndefinedPercentage);
        }
        let scaled = num as u128 * 10_000;
        let den = den as u128;
        Ok(Percent { hundredths: ((2 * scaled + den) / (2 * den)) as u64 })
    }

    pub fn as_f64(self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.hundredths / 100, self.hundredths % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bad = || serde::de::Error::custom(format!("bad percentage {s:?}"));
        let (whole, frac) = s.split_once('.').ok_or_else(bad)?;
        if frac.len() != 2 {
            return Err(bad());
        }
        let w: u64 = whole.parse().map_err(|_| bad())?;
        let f: u64 = frac.parse().map_err(|_| bad())?;
        Ok(Percent { hundredths: w * 100 + f })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikenessReport {
    pub target_city_id: String,
    pub threshold: f64,
    pub evaluated: u64,
    pub matches_unfiltered: u64,
    pub matches_filtered: u64,
    pub pct_unfiltered: Percent,
    pub pct_filtered: Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub city_id: String,
    pub city_name: String,
    pub matches: u64,
    pub share: Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKTable {
    pub threshold: f64,
    pub evaluated: u64,
    pub rows: Vec<TopKRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub records: Vec<PredictionRecord>,
    /// Locations without imagery.
    pub skipped: usize,
}

/// Fails when the evaluation city is one of the trained classes.
pub fn check_contamination(classes: &[String], eval_city: &str) -> Result<()> {
    if classes.iter().any(|c| c == eval_city) {
        return Err(Error::Contamination(format!(
            "evaluation city {eval_city} is a training class of this checkpoint"
        )));
    }
    Ok(())
}

/// Center-crops each image to the network input, predicts in batches and
/// keeps the arg-max class (lowest index on ties).
pub fn predict(
    net: &Network<f32>,
    classes: &[String],
    eval_city: &str,
    items: &[(SampleLocation, Option<RasterImage>)],
    threshold: f64,
    batch_size: usize,
) -> Result<Predictions> {
    check_contamination(classes, eval_city)?;
    if classes.len() != net.num_classes() {
        return Err(Error::invalid(format!("{} class ids for a {}-class network", classes.len(), net.num_classes())));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let size = net.arch.input_size;
    let present: Vec<(&SampleLocation, &RasterImage)> =
        items.iter().filter_map(|(l, img)| img.as_ref().map(|i| (l, i))).collect();
    let skipped = items.len() - present.len();
    let mut records = Vec::with_capacity(present.len());
    for chunk in present.chunks(batch_size.max(1)) {
        let per = size * size * 3;
        let mut data = Vec::with_capacity(chunk.len() * per);
        for (_, img) in chunk {
            let (crop, _) = center_crop(img, size as u32)?;
            data.extend(crop.pixels().iter().map(|&v| crate::dataset::normalize_value(v)));
        }
        let x = Activations::from_nhwc(chunk.len(), size, size, 3, &data);
        let probs = net.predict(&x)?;
        let k = net.num_classes();
        for (i, (loc, _)) in chunk.iter().enumerate() {
            let row = &probs[i * k..(i + 1) * k];
            let best = top_k(row, 1)[0];
            let p = row[best] as f64;
            records.push(PredictionRecord {
                lat: loc.lat,
                lon: loc.lon,
                predicted_city_id: classes[best].clone(),
                probability: p,
                passes_filter: p >= threshold,
            });
        }
    }
    Ok(Predictions { records, skipped })
}

/// Counts how often `target` was predicted, before and after the filter.
pub fn likeness(records: &[PredictionRecord], target: &str, threshold: f64) -> Result<LikenessReport> {
    let evaluated = records.len() as u64;
    let unfiltered = records.iter().filter(|r| r.predicted_city_id == target).count() as u64;
    let filtered =
        records.iter().filter(|r| r.predicted_city_id == target && r.probability >= threshold).count() as u64;
    Ok(LikenessReport {
        target_city_id: target.to_string(),
        threshold,
        evaluated,
        matches_unfiltered: unfiltered,
        matches_filtered: filtered,
        pct_unfiltered: Percent::ratio(unfiltered, evaluated)?,
        pct_filtered: Percent::ratio(filtered, evaluated)?,
    })
}

/// Filtered match counts per predicted city as a share of all evaluated
/// locations; the `k` largest, ties by city name.
pub fn topk_table(
    records: &[PredictionRecord],
    cities: &[CityRecord],
    threshold: f64,
    k: usize,
) -> Result<TopKTable> {
    let names: BTreeMap<&str, &str> = cities.iter().map(|c| (c.id.as_str(), c.name.as_str())).collect();
    let mut tally: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.probability >= threshold) {
        *tally.entry(r.predicted_city_id.as_str()).or_default() += 1;
    }
    let evaluated = records.len() as u64;
    let mut rows = tally
        .into_iter()
        .map(|(id, n)| {
            Ok(TopKRow {
                city_id: id.to_string(),
                city_name: names.get(id).copied().unwrap_or(id).to_string(),
                matches: n,
                share: Percent::ratio(n, evaluated)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.matches.cmp(&a.matches).then_with(|| a.city_name.cmp(&b.city_name)).then_with(|| a.city_id.cmp(&b.city_id)));
    rows.truncate(k);
    Ok(TopKTable { threshold, evaluated, rows })
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::invalid(format!("records file {} not found or unreadable", path.display())),
        _ => Error::from(e),
    })?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Report JSON written next to a records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub likeness: LikenessReport,
    pub top_k: TopKTable,
    pub checkpoint_sha256: Option<String>,
    pub skipped_locations: Option<u64>,
}

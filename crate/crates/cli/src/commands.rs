use std::collections::HashMap;
use std::path::{Path, PathBuf};

use citylike_core::dataset::{build_manifest, CachingLoader, DatasetManifest, IMAGE_INDEX_FILE};
use citylike_core::geo::{
    make_grid, radius_for_population, read_cities, read_locations, sample_disk, write_locations, BBox, CityRecord,
    SampleLocation, SamplingPolicy, WaterMask,
};
use citylike_core::imagery::benchmark::{write_benchmark, BenchmarkSpec};
use citylike_core::imagery::{
    fetch_all, quality_check, read_city_images, sample_with_replacement, write_city_images, CachedProvider,
    DiskCache, ImageryProvider, ImageryRequest, ProviderConfig, Quality, Source,
};
use citylike_core::inference::{likeness, predict, read_records, topk_table, write_records, PredictionRecord, Report};
use citylike_core::network::{
    checkpoint_sha256, evaluate, train, ArchitectureConfig, Checkpoint, OptimizerConfig, TrainOptions,
};
use citylike_core::raster::write_atomic;
use citylike_core::rendering::{render_gallery, render_prediction_map, write_legend, MapCanvas};
use citylike_core::segmentation::{segment, SegmentationParams};
use citylike_core::{Error, RasterImage, Result};
use serde::Serialize;

use crate::provenance::{args_hash, sidecar_path, Provenance, PROVENANCE_FILE};
use crate::{
    Command, DatasetArgs, EvalArgs, FetchArgs, InferArgs, RenderCommand, RenderGalleryArgs, RenderMapArgs, ReportArgs,
    SampleArgs, SegmentArgs, SynthArgs, TrainArgs,
};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Sample(a) => sample_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Fetch(a) => fetch_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Dataset(a) => dataset_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Render(RenderCommand::Map(a)) => render_map_cmd(a),
        Command::Render(RenderCommand::Gallery(a)) => render_gallery_cmd(a),
        Command::Pipeline(a) => {
            let cfg = crate::LoadedConfig::load(&a.config, a.seed)?;
            let layout = crate::run_pipeline(&cfg, a.run_dir.as_deref())?;
            println!("{}", layout.root.display());
            Ok(())
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn stamp_file(artifact: &Path, stage: &str, seed: u64, parts: &[&str]) -> Result<()> {
    Provenance::new(stage, &args_hash(parts), seed).write(&sidecar_path(artifact))
}

fn stamp_dir(dir: &Path, stage: &str, seed: u64, parts: &[&str]) -> Result<()> {
    Provenance::new(stage, &args_hash(parts), seed).write(&dir.join(PROVENANCE_FILE))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub(crate) fn load_mask(path: Option<&Path>) -> Result<WaterMask> {
    path.map_or_else(|| Ok(WaterMask::empty()), WaterMask::load)
}

pub(crate) fn cached(provider: Box<dyn ImageryProvider>, cache: Option<&Path>) -> Box<dyn ImageryProvider> {
    match cache {
        Some(dir) => Box::new(CachedProvider::new(provider, DiskCache::new(dir))),
        None => provider,
    }
}

fn load_provider(path: &Path, seed: u64, cache: Option<&Path>) -> Result<Box<dyn ImageryProvider>> {
    let cfg = ProviderConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(cached(cfg.build(base, seed)?, cache))
}

/// Request for `loc` at the given tile size, zoom and source.
pub(crate) fn request(loc: SampleLocation, source: Source, tile: u32, zoom: u32) -> ImageryRequest {
    let mut r = ImageryRequest::new(loc, source).with_size(tile, tile);
    r.zoom = zoom;
    r
}

/// Fetches fixed locations, skipping missing and unusable imagery. Any
/// other provider error aborts.
pub(crate) fn fetch_fixed(
    provider: &dyn ImageryProvider,
    requests: Vec<ImageryRequest>,
    max_in_flight: usize,
) -> Result<(Vec<(ImageryRequest, RasterImage)>, usize)> {
    let results = fetch_all(provider, &requests, max_in_flight);
    let mut kept = Vec::with_capacity(requests.len());
    let mut skipped = 0;
    for (req, res) in requests.into_iter().zip(results) {
        match res {
            Ok(img) if quality_check(&img) == Quality::Ok => kept.push((req, img)),
            Ok(_) | Err(Error::NoImagery { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((kept, skipped))
}

/// Groups requests by city and writes `<out>/<city_id>/`.
pub(crate) fn write_by_city(out: &Path, items: Vec<(ImageryRequest, RasterImage)>) -> Result<()> {
    let mut by_city: Vec<(String, Vec<(ImageryRequest, RasterImage)>)> = Vec::new();
    for item in items {
        let id = item.0.location.city_id.clone();
        match by_city.iter_mut().find(|(c, _)| *c == id) {
            Some((_, v)) => v.push(item),
            None => by_city.push((id, vec![item])),
        }
    }
    for (city, v) in by_city {
        write_city_images(&out.join(city), &v)?;
    }
    Ok(())
}

/// Pairs each location with the image stored for it in `dir`, if any.
pub(crate) fn attach_images(
    locations: &[SampleLocation],
    dir: &Path,
) -> Result<Vec<(SampleLocation, Option<RasterImage>)>> {
    let mut stored: HashMap<(u64, u64), RasterImage> = HashMap::new();
    if dir.join(IMAGE_INDEX_FILE).exists() {
        for (row, img) in read_city_images(dir)? {
            stored.insert((row.lat.to_bits(), row.lon.to_bits()), img);
        }
    }
    Ok(locations
        .iter()
        .map(|l| (l.clone(), stored.remove(&(l.lat.to_bits(), l.lon.to_bits()))))
        .collect())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Segments every PNG below `input` into the same relative path below
/// `output`. Image index files are copied alongside.
pub(crate) fn segment_tree(input: &Path, output: &Path, params: &SegmentationParams) -> Result<usize> {
    params.validate()?;
    create_dir(output)?;
    let mut count = 0;
    for p in png_files(input)? {
        let img = RasterImage::load(&p)?;
        let seg = segment(&img, params)?;
        seg.image.save_png(&output.join(p.file_name().unwrap_or_default()))?;
        count += 1;
    }
    let index = input.join(IMAGE_INDEX_FILE);
    if index.is_file() {
        let dst = output.join(IMAGE_INDEX_FILE);
        std::fs::copy(&index, &dst).map_err(|e| io_err(&dst, e))?;
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| io_err(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        count += segment_tree(&d, &output.join(d.file_name().unwrap_or_default()), params)?;
    }
    Ok(count)
}

pub(crate) fn build_report(
    records: &[PredictionRecord],
    target: &str,
    threshold: f64,
    k: usize,
    cities: &[CityRecord],
    checkpoint: Option<&Path>,
    skipped: Option<u64>,
) -> Result<Report> {
    Ok(Report {
        likeness: likeness(records, target, threshold)?,
        top_k: topk_table(records, cities, threshold, k)?,
        checkpoint_sha256: checkpoint.map(checkpoint_sha256).transpose()?,
        skipped_locations: skipped,
    })
}

/// Bounding box of the records, padded so single points stay visible.
pub(crate) fn records_bbox(records: &[PredictionRecord]) -> Result<BBox> {
    let first = records.first().ok_or_else(|| Error::InvalidInput("no records to map".into()))?;
    let mut b = BBox { lat_min: first.lat, lon_min: first.lon, lat_max: first.lat, lon_max: first.lon };
    for r in records {
        b.lat_min = b.lat_min.min(r.lat);
        b.lat_max = b.lat_max.max(r.lat);
        b.lon_min = b.lon_min.min(r.lon);
        b.lon_max = b.lon_max.max(r.lon);
    }
    let pad = 0.02 * (b.lat_max - b.lat_min).max(b.lon_max - b.lon_min).max(1e-3);
    b.lat_min = (b.lat_min - pad).max(-90.0);
    b.lat_max = (b.lat_max + pad).min(90.0);
    b.lon_min = (b.lon_min - pad).max(-180.0);
    b.lon_max = (b.lon_max + pad).min(180.0);
    Ok(b)
}

/// Summary written next to a records file.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct InferSummary {
    pub eval_city: String,
    pub locations: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub checkpoint_sha256: String,
}

pub(crate) fn summary_path(records: &Path) -> PathBuf {
    records.with_extension("summary.json")
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let mask = load_mask(a.water_mask.as_deref())?;
    let locs = if let Some(city) = &a.grid {
        let bbox = a.bbox.ok_or_else(|| Error::InvalidInput("--grid needs --bbox".into()))?;
        make_grid(city, bbox, a.spacing, &mask)?
    } else {
        let path = a.cities.as_ref().ok_or_else(|| Error::InvalidInput("sample needs --cities or --grid".into()))?;
        let policy = SamplingPolicy::default();
        let mut out = Vec::new();
        for c in read_cities(path)? {
            let r = radius_for_population(c.population as i64, &policy)?;
            out.extend(sample_disk(&c.id, c.centroid(), r, a.n, &mask, a.seed)?);
        }
        out
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_locations(&a.out, &locs)?;
    stamp_file(&a.out, "sample", a.seed, &["sample", &display(&a.out), &a.n.to_string()])?;
    log::info!("wrote {} locations to {}", locs.len(), a.out.display());
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let spec = BenchmarkSpec {
        styles: a.styles,
        images_per_style: a.images_per_style,
        tile_px: a.tile,
        source: a.source,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    let layout = write_benchmark(&a.out, &spec)?;
    stamp_dir(&a.out, "synth", a.seed, &["synth", &a.styles.to_string(), &a.images_per_style.to_string()])?;
    log::info!("wrote {} styles to {}", layout.cities.len(), layout.image_dir.display());
    Ok(())
}

fn fetch_cmd(a: FetchArgs) -> Result<()> {
    let cfg = ProviderConfig::load(&a.provider)?;
    let provider = load_provider(&a.provider, a.seed, a.cache.as_deref())?;
    let mask = load_mask(a.water_mask.as_deref())?;
    create_dir(&a.out)?;
    if let Some(path) = &a.cities {
        let template = request(
            SampleLocation { city_id: String::new(), kind: citylike_core::geo::LocationKind::Disk, lat: 0.0, lon: 0.0 },
            a.source,
            a.tile,
            citylike_core::imagery::DEFAULT_ZOOM,
        );
        for city in read_cities(path)? {
            let got = sample_with_replacement(
                provider.as_ref(),
                &city,
                a.n,
                &template,
                &SamplingPolicy::default(),
                &mask,
                a.seed,
                cfg.max_in_flight,
            )?;
            log::info!("{}: {} images in {} attempts", city.id, got.items.len(), got.attempts);
            write_city_images(&a.out.join(&city.id), &got.items)?;
        }
    } else if let Some(path) = &a.locations {
        let reqs = read_locations(path)?
            .into_iter()
            .map(|l| request(l, a.source, a.tile, citylike_core::imagery::DEFAULT_ZOOM))
            .collect();
        let (items, skipped) = fetch_fixed(provider.as_ref(), reqs, cfg.max_in_flight)?;
        log::info!("fetched {} images, {skipped} locations without usable imagery", items.len());
        write_by_city(&a.out, items)?;
    } else {
        return Err(Error::InvalidInput("fetch needs --cities or --locations".into()));
    }
    stamp_dir(&a.out, "fetch", a.seed, &["fetch", &display(&a.provider), a.source.as_str()])
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let params = SegmentationParams {
        spatial_radius: a.spatial,
        range_radius: a.range,
        min_density: a.min_density,
        ..Default::default()
    };
    let n = segment_tree(&a.input, &a.out, &params)?;
    stamp_dir(&a.out, "segment", 0, &["segment", &display(&a.input), &format!("{params:?}")])?;
    log::info!("segmented {n} images");
    Ok(())
}

fn dataset_cmd(a: DatasetArgs) -> Result<()> {
    let cities: Vec<CityRecord> = read_cities(&a.cities)?.into_iter().filter(|c| !a.exclude.contains(&c.id)).collect();
    let manifest = build_manifest(&a.images, &cities, a.val_fraction, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    manifest.save(&a.out)?;
    stamp_file(&a.out, "dataset", a.seed, &["dataset", &display(&a.cities), &a.val_fraction.to_string()])?;
    log::info!("{} rows, {} classes", manifest.rows.len(), manifest.num_classes());
    Ok(())
}

/// `toy`, `full` or a JSON file; `num_classes` 0 is filled in.
pub(crate) fn arch_from(spec: &str, num_classes: usize) -> Result<ArchitectureConfig> {
    let mut arch = match spec {
        "toy" => ArchitectureConfig::toy(num_classes),
        "full" => ArchitectureConfig::full(num_classes),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e))?;
            serde_json::from_str(&text)?
        }
    };
    if arch.num_classes == 0 {
        arch.num_classes = num_classes;
    }
    Ok(arch)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let arch = arch_from(&a.arch, manifest.num_classes())?;
    let mut opt = match &a.optimizer {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)?
        }
        None => OptimizerConfig::default(),
    };
    if let Some(e) = a.epochs {
        opt.epochs = e;
    }
    if let Some(b) = a.batch_size {
        opt.batch_size = b;
    }
    if let Some(lr) = a.lr {
        opt.base_lr = lr;
    }
    create_dir(&a.out)?;
    let out = train(&manifest, &CachingLoader::default(), &arch, &opt, &TrainOptions {
        seed: a.seed,
        out_dir: Some(a.out.clone()),
    })?;
    stamp_dir(&a.out, "train", a.seed, &["train", &display(&a.manifest), &a.arch])?;
    if let Some(last) = out.metrics.last() {
        log::info!("final epoch: loss {:.4}, val top-1 {:?}, top-5 {:?}", last.train_loss, last.val_top1, last.val_top5);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    if ckpt.state.classes != manifest.classes() {
        return Err(Error::InvalidInput("checkpoint classes differ from the manifest's class index".into()));
    }
    let res = evaluate(&ckpt.network()?, &manifest, a.split, &CachingLoader::default(), a.batch_size)?;
    match &a.out {
        Some(p) => {
            write_json(p, &res)?;
            stamp_file(p, "eval", ckpt.state.seed, &["eval", &display(&a.checkpoint), &display(&a.manifest)])?;
        }
        None => println!("{}", serde_json::to_string_pretty(&res)?),
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let locs = read_locations(&a.locations)?;
    let eval_city = match &a.eval_city {
        Some(c) => c.clone(),
        None => locs.first().map(|l| l.city_id.clone()).unwrap_or_default(),
    };
    citylike_core::inference::check_contamination(&ckpt.state.classes, &eval_city)?;
    let cfg = ProviderConfig::load(&a.provider)?;
    let provider = load_provider(&a.provider, a.seed, a.cache.as_deref())?;
    let reqs: Vec<ImageryRequest> = locs
        .iter()
        .map(|l| request(l.clone(), a.source, a.tile, citylike_core::imagery::DEFAULT_ZOOM))
        .collect();
    let (items, _) = fetch_fixed(provider.as_ref(), reqs, cfg.max_in_flight)?;
    let mut by_point: HashMap<(u64, u64), RasterImage> =
        items.into_iter().map(|(r, img)| ((r.location.lat.to_bits(), r.location.lon.to_bits()), img)).collect();
    let paired: Vec<(SampleLocation, Option<RasterImage>)> = locs
        .iter()
        .map(|l| (l.clone(), by_point.remove(&(l.lat.to_bits(), l.lon.to_bits()))))
        .collect();
    let preds = predict(&ckpt.network()?, &ckpt.state.classes, &eval_city, &paired, a.threshold, a.batch_size)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_records(&a.out, &preds.records)?;
    let summary = InferSummary {
        eval_city,
        locations: locs.len(),
        evaluated: preds.records.len(),
        skipped: preds.skipped,
        checkpoint_sha256: checkpoint_sha256(&a.checkpoint)?,
    };
    write_json(&summary_path(&a.out), &summary)?;
    stamp_file(&a.out, "infer", a.seed, &["infer", &display(&a.checkpoint), &display(&a.locations)])?;
    log::info!("{} records, {} locations skipped", summary.evaluated, summary.skipped);
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    if !a.records.is_file() {
        return Err(Error::InvalidInput(format!(
            "records file {} does not exist; run infer first",
            a.records.display()
        )));
    }
    let records = read_records(&a.records)?;
    let cities = a.cities.as_deref().map(read_cities).transpose()?.unwrap_or_default();
    let skipped = std::fs::read_to_string(summary_path(&a.records))
        .ok()
        .and_then(|t| serde_json::from_str::<InferSummary>(&t).ok())
        .map(|s| s.skipped as u64);
    let report = build_report(&records, &a.target, a.threshold, a.k, &cities, a.checkpoint.as_deref(), skipped)?;
    match &a.out {
        Some(p) => {
            write_json(p, &report)?;
            stamp_file(p, "report", 0, &["report", &display(&a.records), &a.target])?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn render_map_cmd(a: RenderMapArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let cities = read_cities(&a.cities)?;
    let bbox = match a.bbox {
        Some(b) => b,
        None => records_bbox(&records)?,
    };
    let mut canvas = MapCanvas::new(a.width, a.height, bbox);
    canvas.dot_radius = a.dot_radius;
    canvas.marker_radius = a.marker_radius;
    let map = render_prediction_map(&records, &cities, &canvas, a.target.as_deref())?;
    write_atomic(&a.out, &map.png()?)?;
    if let Some(l) = &a.legend {
        write_legend(l, &cities)?;
    }
    stamp_file(&a.out, "render", 0, &["render-map", &display(&a.records)])?;
    log::info!("{} dots, {} target markers", map.dots, map.markers);
    Ok(())
}

/// The first `max` PNGs of `dir` in file-name order.
pub(crate) fn gallery_images(dir: &Path, max: usize) -> Result<Vec<RasterImage>> {
    png_files(dir)?.iter().take(max).map(|p| RasterImage::load(p)).collect()
}

fn render_gallery_cmd(a: RenderGalleryArgs) -> Result<()> {
    let images = gallery_images(&a.dir, a.max)?;
    let g = render_gallery(&images, a.cols)?;
    write_atomic(&a.out, &g.to_png()?)?;
    stamp_file(&a.out, "render", 0, &["render-gallery", &display(&a.dir)])
}

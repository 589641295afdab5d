//! `pipeline`: every stage in order inside one run directory. A stage whose
//! `provenance.json` already exists is skipped, so an interrupted run
//! resumes where it stopped.

use std::path::{Path, PathBuf};

use citylike_core::dataset::{build_manifest, CachingLoader, DatasetManifest, Split};
use citylike_core::geo::{make_grid, read_cities, read_locations, write_locations, CityRecord, LocationKind, SampleLocation};
use citylike_core::imagery::{
    sample_with_replacement, write_city_images, CachedProvider, DiskCache, ImageryProvider, Source,
};
use citylike_core::inference::{predict, read_records, write_records};
use citylike_core::network::{checkpoint_sha256, evaluate, train, Checkpoint, TrainOptions, CHECKPOINT_FILE};
use citylike_core::raster::write_atomic;
use citylike_core::rendering::{render_gallery, render_prediction_map, write_legend, MapCanvas};
use citylike_core::{Error, Result};

use crate::commands::{
    attach_images, build_report, create_dir, fetch_fixed, gallery_images, request, segment_tree, write_by_city,
    write_json, InferSummary,
};
use crate::config::LoadedConfig;
use crate::provenance::{Provenance, PROVENANCE_FILE};

pub const STAGES: [&str; 9] = ["sample", "raw", "images", "dataset", "train", "eval", "infer", "report", "render"];

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn grid(&self, eval_city: &str) -> PathBuf {
        self.stage("sample").join(format!("{eval_city}.csv"))
    }

    pub fn raw(&self, source: Source) -> PathBuf {
        self.stage("raw").join(source.as_str())
    }

    pub fn manifest(&self, source: Source) -> PathBuf {
        self.stage("dataset").join(source.as_str()).join("manifest.csv")
    }

    pub fn train_dir(&self, source: Source) -> PathBuf {
        self.stage("train").join(source.as_str())
    }

    pub fn checkpoint(&self, source: Source) -> PathBuf {
        self.train_dir(source).join(CHECKPOINT_FILE)
    }

    pub fn eval(&self, source: Source) -> PathBuf {
        self.stage("eval").join(format!("{}.json", source.as_str()))
    }

    pub fn records(&self, source: Source, eval_city: &str) -> PathBuf {
        self.stage("infer").join(source.as_str()).join(format!("{eval_city}.csv"))
    }

    pub fn report(&self, source: Source, eval_city: &str) -> PathBuf {
        self.stage("report").join(source.as_str()).join(format!("{eval_city}.json"))
    }

    pub fn map(&self, source: Source, eval_city: &str) -> PathBuf {
        self.stage("render").join(source.as_str()).join(format!("{eval_city}_map.png"))
    }

    pub fn gallery(&self, source: Source, eval_city: &str) -> PathBuf {
        self.stage("render").join(source.as_str()).join(format!("{eval_city}_gallery.png"))
    }

    pub fn legend(&self) -> PathBuf {
        self.stage("render").join("legend.csv")
    }
}

/// Default run directory: `runs/<UTC timestamp>-<config hash>`.
pub fn default_run_dir(cfg: &LoadedConfig) -> PathBuf {
    let ts = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    PathBuf::from("runs").join(format!("{ts}-{}", cfg.hash()))
}

struct Ctx<'a> {
    cfg: &'a LoadedConfig,
    layout: RunLayout,
    hash: String,
    cities: Vec<CityRecord>,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cfg.config.seed
    }

    fn training_cities(&self) -> Vec<CityRecord> {
        self.cities.iter().filter(|c| !self.cfg.is_eval_city(&c.id)).cloned().collect()
    }

    /// Source directory the dataset and inference stages read from.
    fn images(&self, source: Source) -> PathBuf {
        if self.cfg.config.segmentation.sources.contains(&source) {
            self.layout.stage("images").join(source.as_str())
        } else {
            self.layout.raw(source)
        }
    }

    fn provider(&self) -> Result<Box<dyn ImageryProvider>> {
        let c = &self.cfg.config;
        let inner = c.provider.build(&self.cfg.base_dir, c.seed)?;
        let cache = match &c.cache_dir {
            Some(d) => self.cfg.resolve(d),
            None => self.layout.stage("cache"),
        };
        Ok(Box::new(CachedProvider::new(inner, DiskCache::new(cache))))
    }

    /// Runs `body` unless the stage already finished, then records it.
    fn stage(&self, name: &str, body: impl FnOnce() -> Result<()>) -> Result<()> {
        let dir = self.layout.stage(name);
        let marker = dir.join(PROVENANCE_FILE);
        if marker.is_file() {
            let prev = Provenance::read(&marker)?;
            if prev.config_hash != self.hash {
                return Err(Error::InvalidInput(format!(
                    "{} was produced by config {}, not {}",
                    dir.display(),
                    prev.config_hash,
                    self.hash
                )));
            }
            log::info!("stage {name}: done, skipping");
            return Ok(());
        }
        log::info!("stage {name}");
        create_dir(&dir)?;
        body()?;
        Provenance::new(name, &self.hash, self.seed()).write(&marker)
    }
}

/// Runs every stage for `cfg`. Returns the run directory layout.
pub fn run_pipeline(cfg: &LoadedConfig, run_dir: Option<&Path>) -> Result<RunLayout> {
    let root = run_dir.map_or_else(|| default_run_dir(cfg), Path::to_path_buf);
    create_dir(&root)?;
    let ctx = Ctx {
        cfg,
        layout: RunLayout { root },
        hash: cfg.hash(),
        cities: read_cities(&cfg.resolve(&cfg.config.cities_file))?,
    };
    write_json(&ctx.layout.root.join("config.json"), &cfg.config)?;
    let c = &cfg.config;
    let sources = c.sampling.sources.clone();

    ctx.stage("sample", || sample_stage(&ctx))?;
    ctx.stage("raw", || raw_stage(&ctx))?;
    ctx.stage("images", || {
        for &s in sources.iter().filter(|s| c.segmentation.sources.contains(s)) {
            let raw = ctx.layout.raw(s);
            let n = segment_tree(&raw, &ctx.images(s), &c.segmentation.params)?;
            log::info!("segmented {n} {s} images");
        }
        Ok(())
    })?;
    ctx.stage("dataset", || {
        let cities = ctx.training_cities();
        for &s in &sources {
            let mut m = build_manifest(&[ctx.images(s)], &cities, c.dataset.val_fraction, c.seed)?;
            m.relativize_paths(&ctx.layout.root);
            let path = ctx.layout.manifest(s);
            create_dir(path.parent().unwrap_or(Path::new(".")))?;
            m.save(&path)?;
        }
        Ok(())
    })?;
    ctx.stage("train", || {
        for &s in &sources {
            let m = load_manifest(&ctx, s)?;
            let mut arch = c.architecture.clone();
            if arch.num_classes == 0 {
                arch.num_classes = m.num_classes();
            }
            let out = ctx.layout.train_dir(s);
            create_dir(&out)?;
            train(&m, &CachingLoader::default(), &arch, &c.optimizer, &TrainOptions {
                seed: c.seed,
                out_dir: Some(out),
            })?;
        }
        Ok(())
    })?;
    ctx.stage("eval", || {
        for &s in &sources {
            let m = load_manifest(&ctx, s)?;
            let net = Checkpoint::load(&ctx.layout.checkpoint(s))?.network()?;
            let res = evaluate(&net, &m, Split::Val, &CachingLoader::default(), c.inference.batch_size)?;
            write_json(&ctx.layout.eval(s), &res)?;
        }
        Ok(())
    })?;
    ctx.stage("infer", || infer_stage(&ctx))?;
    ctx.stage("report", || {
        for &s in &sources {
            let ckpt = ctx.layout.checkpoint(s);
            for e in &c.evaluation {
                let records = read_records(&ctx.layout.records(s, &e.city_id))?;
                let summary: InferSummary = read_json(&ctx.layout.records(s, &e.city_id).with_extension("summary.json"))?;
                let inf = &c.inference;
                let report = build_report(
                    &records,
                    &inf.target,
                    inf.threshold,
                    inf.k,
                    &ctx.cities,
                    Some(&ckpt),
                    Some(summary.skipped as u64),
                )?;
                let path = ctx.layout.report(s, &e.city_id);
                create_dir(path.parent().unwrap_or(Path::new(".")))?;
                write_json(&path, &report)?;
            }
        }
        Ok(())
    })?;
    ctx.stage("render", || render_stage(&ctx))?;
    Ok(ctx.layout)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::commands::io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_manifest(ctx: &Ctx, s: Source) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::load(&ctx.layout.manifest(s))?;
    m.resolve_paths(&ctx.layout.root);
    Ok(m)
}

fn sample_stage(ctx: &Ctx) -> Result<()> {
    let mask = crate::commands::load_mask(ctx.cfg.config.water_mask_file.as_ref().map(|p| ctx.cfg.resolve(p)).as_deref())?;
    for e in &ctx.cfg.config.evaluation {
        let grid = make_grid(&e.city_id, e.bbox, e.spacing_m, &mask)?;
        log::info!("{}: {} grid points", e.city_id, grid.len());
        write_locations(&ctx.layout.grid(&e.city_id), &grid)?;
    }
    Ok(())
}

fn raw_stage(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.config;
    let provider = ctx.provider()?;
    let mask = crate::commands::load_mask(c.water_mask_file.as_ref().map(|p| ctx.cfg.resolve(p)).as_deref())?;
    let s = &c.sampling;
    for &source in &s.sources {
        let out = ctx.layout.raw(source);
        let template = request(
            SampleLocation { city_id: String::new(), kind: LocationKind::Disk, lat: 0.0, lon: 0.0 },
            source,
            s.tile_px,
            s.zoom,
        );
        for city in ctx.training_cities() {
            let got = sample_with_replacement(
                provider.as_ref(),
                &city,
                s.images_per_city,
                &template,
                &s.policy,
                &mask,
                c.seed,
                c.provider.max_in_flight,
            )?;
            log::info!("{source}/{}: {} images in {} attempts", city.id, got.items.len(), got.attempts);
            write_city_images(&out.join(&city.id), &got.items)?;
        }
        for e in &c.evaluation {
            let grid = read_locations(&ctx.layout.grid(&e.city_id))?;
            let reqs = grid.into_iter().map(|l| request(l, source, s.tile_px, s.zoom)).collect();
            let (items, skipped) = fetch_fixed(provider.as_ref(), reqs, c.provider.max_in_flight)?;
            log::info!("{source}/{}: {} images, {skipped} locations skipped", e.city_id, items.len());
            create_dir(&out.join(&e.city_id))?;
            write_by_city(&out, items)?;
        }
    }
    Ok(())
}

fn infer_stage(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.config;
    for &s in &c.sampling.sources {
        let path = ctx.layout.checkpoint(s);
        let ckpt = Checkpoint::load(&path)?;
        let net = ckpt.network()?;
        let sha = checkpoint_sha256(&path)?;
        for e in &c.evaluation {
            let grid = read_locations(&ctx.layout.grid(&e.city_id))?;
            let items = attach_images(&grid, &ctx.images(s).join(&e.city_id))?;
            let preds = predict(&net, &ckpt.state.classes, &e.city_id, &items, c.inference.threshold, c.inference.batch_size)?;
            let out = ctx.layout.records(s, &e.city_id);
            create_dir(out.parent().unwrap_or(Path::new(".")))?;
            write_records(&out, &preds.records)?;
            write_json(&out.with_extension("summary.json"), &InferSummary {
                eval_city: e.city_id.clone(),
                locations: grid.len(),
                evaluated: preds.records.len(),
                skipped: preds.skipped,
                checkpoint_sha256: sha.clone(),
            })?;
        }
    }
    Ok(())
}

fn render_stage(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.config;
    write_legend(&ctx.layout.legend(), &ctx.cities)?;
    for &s in &c.sampling.sources {
        for e in &c.evaluation {
            let records = read_records(&ctx.layout.records(s, &e.city_id))?;
            let canvas = MapCanvas::new(c.render.width, c.render.height, e.bbox);
            let map = render_prediction_map(&records, &ctx.cities, &canvas, Some(&c.inference.target))?;
            let path = ctx.layout.map(s, &e.city_id);
            create_dir(path.parent().unwrap_or(Path::new(".")))?;
            write_atomic(&path, &map.png()?)?;
            let images = gallery_images(&ctx.images(s).join(&e.city_id), c.render.gallery_max)?;
            if !images.is_empty() {
                let g = render_gallery(&images, c.render.gallery_columns)?;
                write_atomic(&ctx.layout.gallery(s, &e.city_id), &g.to_png()?)?;
            }
        }
    }
    Ok(())
}

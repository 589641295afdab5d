use std::path::{Path, PathBuf};

use citylike_core::geo::{BBox, SamplingPolicy};
use citylike_core::imagery::{ProviderConfig, Source, DEFAULT_ZOOM};
use citylike_core::inference::{DEFAULT_THRESHOLD, DEFAULT_TOP_K};
use citylike_core::network::{ArchitectureConfig, OptimizerConfig};
use citylike_core::segmentation::SegmentationParams;
use citylike_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_images() -> usize {
    1000
}

fn default_sources() -> Vec<Source> {
    vec![Source::Map]
}

fn default_tile() -> u32 {
    256
}

fn default_zoom() -> u32 {
    DEFAULT_ZOOM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_images")]
    pub images_per_city: usize,
    #[serde(default = "default_sources")]
    pub sources: Vec<Source>,
    #[serde(default = "default_tile")]
    pub tile_px: u32,
    #[serde(default = "default_zoom")]
    pub zoom: u32,
    #[serde(default)]
    pub policy: SamplingPolicy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            images_per_city: default_images(),
            sources: default_sources(),
            tile_px: default_tile(),
            zoom: default_zoom(),
            policy: SamplingPolicy::default(),
        }
    }
}

fn default_segmented() -> Vec<Source> {
    vec![Source::Streetview]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Sources whose images are segmented before training and inference.
    #[serde(default = "default_segmented")]
    pub sources: Vec<Source>,
    #[serde(default)]
    pub params: SegmentationParams,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig { sources: default_segmented(), params: SegmentationParams::default() }
    }
}

fn default_val_fraction() -> f64 {
    citylike_core::dataset::DEFAULT_VAL_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { val_fraction: default_val_fraction() }
    }
}

/// A city scored on a regular grid; never used for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCity {
    pub city_id: String,
    pub bbox: BBox,
    pub spacing_m: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_k() -> usize {
    DEFAULT_TOP_K
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// City whose likeness is reported.
    pub target: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_canvas() -> u32 {
    800
}

fn default_cols() -> u32 {
    3
}

fn default_gallery_max() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default = "default_canvas")]
    pub width: u32,
    #[serde(default = "default_canvas")]
    pub height: u32,
    #[serde(default = "default_cols")]
    pub gallery_columns: u32,
    #[serde(default = "default_gallery_max")]
    pub gallery_max: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: default_canvas(),
            height: default_canvas(),
            gallery_columns: default_cols(),
            gallery_max: default_gallery_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub cities_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub water_mask_file: Option<PathBuf>,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub evaluation: Vec<EvalCity>,
    pub inference: InferenceConfig,
    #[serde(default)]
    pub render: RenderConfig,
    /// Imagery cache; defaults to `<run dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            config.seed = s;
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedConfig { config, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let mut files = vec![c.cities_file.clone()];
        files.extend(c.water_mask_file.clone());
        files.extend(c.provider.styles_file.as_ref().map(PathBuf::from));
        for f in files {
            let p = self.resolve(&f);
            if !p.is_file() {
                return Err(Error::InvalidInput(format!("referenced file {} does not exist", p.display())));
            }
        }
        if c.sampling.sources.is_empty() {
            return Err(Error::InvalidInput("sampling.sources is empty".into()));
        }
        if c.sampling.images_per_city < 4 {
            return Err(Error::InvalidInput("sampling.images_per_city must be at least 4".into()));
        }
        if c.sampling.tile_px < c.architecture.input_size as u32 {
            return Err(Error::InvalidInput(format!(
                "tile_px {} is smaller than the network input {}",
                c.sampling.tile_px, c.architecture.input_size
            )));
        }
        if c.evaluation.is_empty() {
            return Err(Error::InvalidInput("evaluation lists no cities".into()));
        }
        for e in &c.evaluation {
            e.bbox.validate()?;
            if !(e.spacing_m > 0.0) {
                return Err(Error::InvalidInput(format!("evaluation {}: spacing_m must be positive", e.city_id)));
            }
        }
        if !(0.0..=1.0).contains(&c.inference.threshold) {
            return Err(Error::InvalidInput("inference.threshold must lie in [0, 1]".into()));
        }
        c.segmentation.params.validate()?;
        c.optimizer.validate()?;
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..12].to_string()
    }

    pub fn is_eval_city(&self, id: &str) -> bool {
        self.config.evaluation.iter().any(|e| e.city_id == id)
    }
}

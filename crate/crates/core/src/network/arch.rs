use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel counts of one inception block's four parallel branches:
/// 1x1; 1x1 then 3x3; 1x1 then two 3x3; 3x3 max-pool then 1x1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionBlockSpec {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub pool_proj: usize,
    /// Stride-2 max-pool after the block.
    #[serde(default)]
    pub pool_after: bool,
}

impl InceptionBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b2 + self.b3 + self.pool_proj
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Square input crop side in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub blocks: Vec<InceptionBlockSpec>,
    pub dropout_rate: f64,
    /// Filled in from the class index when a config leaves it at 0.
    #[serde(default)]
    pub num_classes: usize,
    /// Running-average momentum of batch-norm statistics.
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

impl ArchitectureConfig {
    /// Small variant for 64px crops, used by tests and the bundled demo.
    pub fn toy(num_classes: usize) -> Self {
        ArchitectureConfig {
            input_size: 64,
            stem_channels: 16,
            blocks: vec![
                InceptionBlockSpec { b1: 8, b2_reduce: 8, b2: 12, b3_reduce: 4, b3: 6, pool_proj: 6, pool_after: true },
                InceptionBlockSpec { b1: 16, b2_reduce: 12, b2: 24, b3_reduce: 6, b3: 12, pool_proj: 12, pool_after: false },
            ],
            dropout_rate: 0.2,
            num_classes,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// Full-size variant for 224px crops.
    pub fn full(num_classes: usize) -> Self {
        let b = |b1, b2r, b2, b3r, b3, pp, pool_after| InceptionBlockSpec {
            b1,
            b2_reduce: b2r,
            b2,
            b3_reduce: b3r,
            b3,
            pool_proj: pp,
            pool_after,
        };
        ArchitectureConfig {
            input_size: 224,
            stem_channels: 64,
            blocks: vec![
                b(64, 64, 64, 64, 96, 32, false),
                b(64, 64, 96, 64, 96, 64, true),
                b(224, 64, 96, 96, 128, 128, false),
                b(192, 96, 128, 96, 128, 128, false),
                b(160, 128, 160, 128, 160, 96, true),
                b(352, 192, 320, 160, 224, 128, false),
            ],
            dropout_rate: 0.2,
            num_classes,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 {
            return Err(Error::invalid("input_size must be at least 4"));
        }
        if self.stem_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("stem_channels and num_classes must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if [b.b1, b.b2_reduce, b.b2, b.b3_reduce, b.b3, b.pool_proj].contains(&0) {
                return Err(Error::invalid(format!("block {i} has a zero-width branch")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::invalid("bn_momentum must lie in [0, 1) and bn_eps be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub base_lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// L2 coefficient applied to conv and dense weights.
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { momentum: 0.9, base_lr: 0.05, lr_decay: 0.94, l2: 1e-4, batch_size: 64, epochs: 150 }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be finite and non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1]"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid("l2 must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

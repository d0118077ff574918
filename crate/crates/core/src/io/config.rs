use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{FusionConfig, PoolingMode, DEFAULT_POS_WEIGHT, MAX_CANDIDATES};
use crate::layout4d::BpsConfig;
use crate::metrics::{EvalOptions, DEFAULT_THRESHOLDS};

/// Everything a pipeline run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fusion: FusionConfig,
    pub bps: BpsConfig,
    pub pooling: PoolingMode,
    pub eval: EvalOptions,
    pub thresholds: Vec<f64>,
    /// Feature width D; inferred from the feature files when absent.
    pub feature_dim: Option<usize>,
    /// Candidate masks kept per keyframe. The padded tensor width is 256 but
    /// at most 255 masks are ever scored.
    pub n_o: usize,
    /// Decoder queries read per (keyframe, human).
    pub n_q: usize,
    /// Slots in the packed 3D feature matrix.
    pub n_3d: usize,
    pub pos_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            bps: BpsConfig::default(),
            pooling: PoolingMode::default(),
            eval: EvalOptions::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            feature_dim: None,
            n_o: 256,
            n_q: 24,
            n_3d: 256,
            pos_weight: DEFAULT_POS_WEIGHT,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = super::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.bps.validate()?;
        if self.thresholds.is_empty() {
            return Err(Error::Config("no IoU thresholds".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} outside (0, 1)")));
        }
        if self.n_o == 0 || self.n_q == 0 || self.n_3d == 0 {
            return Err(Error::Config("n_o, n_q and n_3d must be positive".into()));
        }
        if self.feature_dim == Some(0) {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::Config(format!("pos_weight {} must be positive", self.pos_weight)));
        }
        Ok(())
    }

    /// Masks actually scored per keyframe.
    pub fn candidate_cap(&self) -> usize {
        if self.n_o > MAX_CANDIDATES {
            warn!("n_o = {} clipped to {MAX_CANDIDATES} scored candidates", self.n_o);
        }
        self.n_o.min(MAX_CANDIDATES)
    }
}

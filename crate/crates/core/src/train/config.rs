use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClipMode, Normalization, PULossConfig};
use crate::segnet::NetConfig;

/// Optimizer, schedule, loss and network settings of a run.
///
/// Serialized as the run configuration file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch: usize,
    pub iters_stage1: u64,
    pub iters_stage2: u64,
    pub lr_decay: f64,
    /// Steps between decays; a tenth of the stage length when absent.
    pub decay_interval: Option<u64>,
    /// Weight of the source prediction in the mixed pseudo-label.
    pub alpha: f64,
    /// Source probability above which an in-box pixel counts as foreground.
    pub tau: f64,
    pub lambda_seg: f64,
    pub lambda_pu: f64,
    pub pu_normalization: Normalization,
    pub pu_clip_mode: ClipMode,
    pub net: NetConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            betas: (0.5, 0.999),
            adam_eps: 1e-8,
            batch: 4,
            iters_stage1: 2000,
            iters_stage2: 2000,
            lr_decay: 0.9,
            decay_interval: None,
            alpha: 0.5,
            tau: 0.5,
            lambda_seg: 1.0,
            lambda_pu: 1.0,
            pu_normalization: Normalization::default(),
            pu_clip_mode: ClipMode::default(),
            net: NetConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_interval == Some(0) {
            return bad("decay_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.tau) {
            return bad("alpha and tau must lie in [0, 1]");
        }
        if !(self.lambda_seg >= 0.0 && self.lambda_pu >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        self.net.validate()
    }

    pub fn decay_interval_for(&self, stage_iterations: u64) -> u64 {
        self.decay_interval.unwrap_or(stage_iterations / 10).max(1)
    }

    pub fn pu_config(&self) -> PULossConfig {
        PULossConfig {
            normalization: self.pu_normalization,
            clip: self.pu_clip_mode,
        }
    }
}

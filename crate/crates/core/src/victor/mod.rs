//! VICTOR: a set transformer over garment feature tokens plus a regression
//! token, with an outfit compatibility head and a per-item mismatch head.

mod batch;
mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::catalog::MAX_ITEMS;
use crate::error::{Error, Result};
use crate::numeric::StepDecay;

pub use batch::BatchedOutfits;
pub use loss::{victor_loss, LossParts};
pub use model::{Outputs, VictorModel};
pub use train::{evaluate, select_checkpoint, train_victor, write_metrics, CheckpointRecord, EpochRecord, TrainOutcome};

/// Which targets drive the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskMode {
    /// Binary compatibility: BCE on the compatibility output.
    OCb,
    /// Compatibility regression: MSE on the compatibility output.
    OCr,
    /// Mismatching item detection: masked BCE on the item outputs.
    MID,
    /// `MSE + α·BCE`.
    MTL,
}

impl TaskMode {
    pub fn trains_ocr(self) -> bool {
        matches!(self, TaskMode::OCb | TaskMode::OCr | TaskMode::MTL)
    }

    pub fn trains_mid(self) -> bool {
        matches!(self, TaskMode::MID | TaskMode::MTL)
    }
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::OCb => "OCb",
            TaskMode::OCr => "OCr",
            TaskMode::MID => "MID",
            TaskMode::MTL => "MTL",
        })
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ocb" => Ok(TaskMode::OCb),
            "ocr" => Ok(TaskMode::OCr),
            "mid" => Ok(TaskMode::MID),
            "mtl" => Ok(TaskMode::MTL),
            _ => Err(Error::Config(format!("unknown task mode `{s}` (expected OCb, OCr, MID or MTL)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictorConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub max_items: usize,
    /// Width `e` of one modality's cached features.
    pub feature_dim: usize,
    /// Concatenate text features after the visual ones.
    pub multimodal: bool,
    pub task_mode: TaskMode,
    pub alpha: f64,
    pub batch: usize,
    pub epochs: usize,
    pub schedule: StepDecay,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for VictorConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            d_model: 64,
            heads: 16,
            ffn_mult: 4,
            dropout: 0.2,
            max_items: MAX_ITEMS,
            feature_dim: 64,
            multimodal: false,
            task_mode: TaskMode::MTL,
            alpha: 0.2,
            batch: 128,
            epochs: 20,
            schedule: StepDecay::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl VictorConfig {
    /// Two layers with a `2d` feed-forward and a 1e-3 base rate: the
    /// configuration the desk pipeline trains in about a minute per run.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            ffn_mult: 2,
            schedule: StepDecay { base_lr: 1e-3, ..StepDecay::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return cfg("layers, d_model, heads and ffn_mult must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return cfg(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.feature_dim < 2 {
            return cfg(format!("feature_dim must be at least 2, got {}", self.feature_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(2..=MAX_ITEMS).contains(&self.max_items) {
            return cfg(format!("max_items must lie in 2..={MAX_ITEMS}, got {}", self.max_items));
        }
        if self.task_mode == TaskMode::MTL && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return cfg(format!("alpha must be positive in MTL mode, got {}", self.alpha));
        }
        if self.batch == 0 {
            return cfg("batch must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return cfg(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        if self.multimodal {
            2 * self.feature_dim
        } else {
            self.feature_dim
        }
    }

    pub fn ocr_hidden(&self) -> usize {
        (self.feature_dim / 2).max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// `VICTOR[mode;alpha;m]`, with the alpha slot only for MTL.
    pub fn label(&self, m: usize) -> String {
        match self.task_mode {
            TaskMode::MTL => format!("VICTOR[MTL;{};{m}]", self.alpha),
            mode => format!("VICTOR[{mode};{m}]"),
        }
    }
}

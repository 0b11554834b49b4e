//! Explicit-gradient training harnesses.

mod binconv;
mod data;
mod quantizer;
mod toynet;

pub use binconv::{binconv_backward, binconv_forward, BinConvCache, BinConvGrads, BinConvLayer, ChannelAffine};
pub use data::{Dataset, SyntheticBlobs};
pub use quantizer::{train_quantizer, QuantizerProblem, QuantizerRun};
pub use toynet::{train_toynet, EpochMetrics, ToyNet, ToyNetConfig, ToyRun};

use crate::error::{invalid, Result};
use crate::optim::OptimizerKind;
use crate::pste::SelectionMode;
use crate::sinkhorn::SinkhornConfig;

/// Hyper-parameters shared by both harnesses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Iterations of the selection phase.
    pub steps: usize,
    /// Toy net only: iterations of the real-weight phase that precedes selection.
    pub warmup_steps: usize,
    /// Toy net only: weight-only iterations after selection, with the
    /// noise-free sub-codebook held fixed.
    pub settle_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Linear decay of the learning rate to zero over each phase.
    pub lr_decay: bool,
    pub n: usize,
    /// `None` picks [`SelectionMode::default_for`].
    pub mode: Option<SelectionMode>,
    pub iterations: usize,
    pub tau: f64,
    pub gumbel: bool,
    /// Per-output-channel real scale on binarized weights. `None` means off
    /// for the quantizer and on for the toy net.
    pub channel_scale: Option<bool>,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 500,
            warmup_steps: 300,
            settle_steps: 300,
            batch: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            lr_decay: false,
            n: 16,
            mode: None,
            iterations: 10,
            tau: 1e-2,
            gumbel: true,
            channel_scale: None,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 {
            return invalid("steps must be >= 1");
        }
        if self.batch == 0 {
            return invalid("batch must be >= 1");
        }
        if self.log_interval == 0 {
            return invalid("log_interval must be >= 1");
        }
        if self.weight_decay < 0.0 {
            return invalid("weight_decay must be >= 0");
        }
        self.sinkhorn().validate()
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            iterations: self.iterations,
            tau: self.tau,
            gumbel: self.gumbel,
            seed: self.seed,
        }
    }

    pub fn mode_for(&self, kernel_size: usize) -> SelectionMode {
        self.mode.unwrap_or_else(|| SelectionMode::default_for(kernel_size))
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.lr_decay {
            self.lr * (1.0 - step as f64 / total as f64)
        } else {
            self.lr
        }
    }
}

/// Seed offset for the logits initialization, kept apart from the noise stream.
const LOGIT_SEED_SALT: u64 = 0x005E_ED0F_1061;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sparks_core::trainer::{TrainConfig, ToyNetConfig};
use sparks_core::{OptimizerKind, SelectionMode};

use crate::error::CliError;

/// Which harness `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Harness {
    Quantizer,
    ToyNet,
}

/// Parsed `key=value` training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub harness: Harness,
    pub train: TrainConfig,
    pub kernel_size: usize,
    /// Quantizer: number of random kernels.
    pub kernels: usize,
    /// Seed for the generated kernels or dataset, independent of `seed`.
    pub data_seed: u64,
    /// Toy net: synthetic sample count when no dataset is given.
    pub samples: usize,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub stem_channels: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            harness: Harness::Quantizer,
            train: TrainConfig::default(),
            kernel_size: 3,
            kernels: 64,
            data_seed: 0,
            samples: 128,
            images: None,
            labels: None,
            stem_channels: ToyNetConfig::default().stem_channels,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "n",
    "k",
    "tau",
    "gumbel",
    "selection",
    "lr",
    "lr_decay",
    "optimizer",
    "weight_decay",
    "steps",
    "warmup_steps",
    "settle_steps",
    "batch",
    "channel_scale",
    "log_interval",
    "kernel_size",
    "kernels",
    "data_seed",
    "samples",
    "images",
    "labels",
    "stem_channels",
    "out_dir",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, CliError> {
    raw.parse().map_err(|_| CliError::Config {
        line,
        msg: format!("bad value {raw:?} for key `{key}`"),
    })
}

fn boolean(line: usize, key: &str, raw: &str) -> Result<bool, CliError> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config {
            line,
            msg: format!("bad value {raw:?} for key `{key}`, expected true or false"),
        }),
    }
}

impl RunConfig {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, val)) = body.split_once('=') else {
                return Err(CliError::Config {
                    line,
                    msg: format!("expected key=value, got {body:?}"),
                });
            };
            let (key, val) = (key.trim(), val.trim());
            let t = &mut cfg.train;
            match key {
                "mode" => {
                    cfg.harness = match val {
                        "quantizer" => Harness::Quantizer,
                        "toynet" => Harness::ToyNet,
                        _ => {
                            return Err(CliError::Config {
                                line,
                                msg: format!("mode must be quantizer or toynet, got {val:?}"),
                            })
                        }
                    }
                }
                "seed" => t.seed = value(line, key, val)?,
                "n" => t.n = value(line, key, val)?,
                "k" => t.iterations = value(line, key, val)?,
                "tau" => t.tau = value(line, key, val)?,
                "gumbel" => t.gumbel = boolean(line, key, val)?,
                "selection" => {
                    t.mode = Some(match val {
                        "plain" => SelectionMode::Plain,
                        "symmetric" => SelectionMode::Symmetric,
                        _ => {
                            return Err(CliError::Config {
                                line,
                                msg: format!("selection must be plain or symmetric, got {val:?}"),
                            })
                        }
                    })
                }
                "lr" => t.lr = value(line, key, val)?,
                "lr_decay" => t.lr_decay = boolean(line, key, val)?,
                "optimizer" => {
                    t.optimizer = match val {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        _ => {
                            return Err(CliError::Config {
                                line,
                                msg: format!("optimizer must be adam or sgd, got {val:?}"),
                            })
                        }
                    }
                }
                "weight_decay" => t.weight_decay = value(line, key, val)?,
                "steps" => t.steps = value(line, key, val)?,
                "warmup_steps" => t.warmup_steps = value(line, key, val)?,
                "settle_steps" => t.settle_steps = value(line, key, val)?,
                "batch" => t.batch = value(line, key, val)?,
                "channel_scale" => t.channel_scale = Some(boolean(line, key, val)?),
                "log_interval" => t.log_interval = value(line, key, val)?,
                "kernel_size" => cfg.kernel_size = value(line, key, val)?,
                "kernels" => cfg.kernels = value(line, key, val)?,
                "data_seed" => cfg.data_seed = value(line, key, val)?,
                "samples" => cfg.samples = value(line, key, val)?,
                "images" => cfg.images = Some(base.join(val)),
                "labels" => cfg.labels = Some(base.join(val)),
                "stem_channels" => cfg.stem_channels = value(line, key, val)?,
                "out_dir" => cfg.out_dir = base.join(val),
                _ => {
                    return Err(CliError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Invalid(msg));
        self.train.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        if !(2..=5).contains(&self.kernel_size) {
            return bad(format!("kernel_size must be in 2..=5, got {}", self.kernel_size));
        }
        let words = 1usize << (self.kernel_size * self.kernel_size);
        if !self.train.n.is_power_of_two() || self.train.n < 2 || self.train.n > words {
            return bad(format!("n = {} must be a power of two in 2..={words}", self.train.n));
        }
        if self.harness == Harness::ToyNet && self.kernel_size != 3 {
            return bad("the toy net is built for kernel_size = 3".into());
        }
        if self.harness == Harness::Quantizer && self.kernels == 0 {
            return bad("kernels must be >= 1".into());
        }
        if self.images.is_some() != self.labels.is_some() {
            return bad("images and labels must be given together".into());
        }
        if self.images.is_none() && self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if self.stem_channels == 0 {
            return bad("stem_channels must be >= 1".into());
        }
        Ok(())
    }
}

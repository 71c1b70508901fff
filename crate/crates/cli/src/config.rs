//! Run configuration: a flat `key=value` text file with full-precision
//! decimal parsing. Command-line flags override file values; defaults follow
//! the standard recipe (seed 42, 100 epochs, lr 0.001, weight decay 1e-4,
//! batch 32, smoothing 0.1, clip 1.0, stratified 80/20 holdout).

use std::fmt;
use std::path::Path;

use detect_core::eval::NrsPredicate;
use detect_core::model::{Activation, ModelConfig};
use detect_core::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Holdout(f64),
    KFold(usize),
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::Holdout(frac) => write!(f, "holdout_{frac}"),
            SplitSpec::KFold(k) => write!(f, "kfold_{k}"),
        }
    }
}

impl SplitSpec {
    fn parse(s: &str) -> Option<Self> {
        if let Some(frac) = s.strip_prefix("holdout_") {
            let frac: f64 = frac.parse().ok()?;
            (0.0 < frac && frac < 1.0).then_some(SplitSpec::Holdout(frac))
        } else if let Some(k) = s.strip_prefix("kfold_") {
            let k: usize = k.parse().ok()?;
            (k >= 2).then_some(SplitSpec::KFold(k))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub warmup_frac: f64,
    pub split: SplitSpec,
    pub nrs_predicate: NrsPredicate,
    pub trim_s: f64,
    pub window: usize,
    pub step: usize,
    pub model: ModelConfig,
    /// True when a `model.seed` key pinned the model seed independently of
    /// the run seed.
    model_seed_pinned: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            warmup_frac: 0.1,
            split: SplitSpec::Holdout(0.8),
            nrs_predicate: NrsPredicate::And,
            trim_s: 2.5,
            window: 100,
            step: 50,
            model: ModelConfig::default(),
            model_seed_pinned: false,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError {
    pub file: String,
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.msg)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Load defaults, then apply `key=value` lines from the file. `#` starts
    /// a comment; blank lines are ignored.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError {
                file: path.display().to_string(),
                line: idx + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got \"{line}\"")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        // Unless pinned, the model seed follows the run seed.
        if !cfg.model_seed_pinned {
            cfg.model.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value \"{value}\" for {key}"))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "warmup_frac" => self.warmup_frac = num(key, value)?,
            "trim_s" => self.trim_s = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "step" => self.step = num(key, value)?,
            "split" => {
                self.split = SplitSpec::parse(value)
                    .ok_or_else(|| format!("bad split \"{value}\" (holdout_<frac> or kfold_<k>)"))?
            }
            "nrs_predicate" => {
                self.nrs_predicate = NrsPredicate::parse(value)
                    .ok_or_else(|| format!("bad nrs_predicate \"{value}\" (and|or)"))?
            }
            "model.latent_dim" => self.model.latent_dim = num(key, value)?,
            "model.num_layers" => self.model.num_layers = num(key, value)?,
            "model.num_heads" => self.model.num_heads = num(key, value)?,
            "model.ffn_dim" => self.model.ffn_dim = num(key, value)?,
            "model.dropout" => self.model.dropout_p = num(key, value)?,
            "model.seq_len" => self.model.seq_len = num(key, value)?,
            "model.activation" => {
                self.model.activation = Activation::parse(value)
                    .ok_or_else(|| format!("bad activation \"{value}\" (gelu|relu)"))?
            }
            "model.positional_encoding" => {
                self.model.positional_encoding = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("bad bool \"{value}\" for {key}")),
                }
            }
            "model.seed" => {
                self.model.seed = num(key, value)?;
                self.model_seed_pinned = true;
            }
            _ => return Err(format!("unknown key \"{key}\"")),
        }
        Ok(())
    }

    /// Flag overrides applied after any file.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if !self.model_seed_pinned {
            self.model.seed = seed;
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            label_smoothing: self.label_smoothing,
            clip_norm: self.clip_norm,
            warmup_frac: self.warmup_frac,
            train_frac: match self.split {
                SplitSpec::Holdout(frac) => frac,
                SplitSpec::KFold(_) => 0.8,
            },
            seed: self.seed,
        }
    }
}

//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::recognizer::PretrainConfig;
use crate::tpgsr::{default_lambdas, ModelConfig, StagePlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelPreset {
    Standard,
    Desk,
}

impl ModelPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Standard => ModelConfig::standard(),
            ModelPreset::Desk => ModelConfig::desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    /// Pretrained recognizer checkpoint (parameters named `rec.*`).
    pub recognizer: PathBuf,
    pub run_dir: PathBuf,
    pub model: ModelPreset,
    pub stages: usize,
    /// `None` derives the weights from the stage count.
    pub lambdas: Option<Vec<f64>>,
    pub share_sr: bool,
    pub share_tpg: bool,
    pub stop_grad: bool,
    pub loss: LossConfig,
    pub tuned: bool,
    pub use_tp: bool,
    pub batch: usize,
    /// Single-stage training epochs.
    pub epochs: usize,
    /// Multi-stage fine-tuning epochs, initialized from the single-stage model.
    pub finetune_epochs: usize,
    pub lr: f64,
    /// Epoch (1-based, within each phase) from which the learning rate is halved; 0 never.
    pub lr_halve_epoch: usize,
    pub precision: Precision,
    pub grid_samples: usize,
    /// Evaluate on the test split every this many epochs; 0 only at the end.
    pub eval_every: usize,
    pub rec_epochs: usize,
    pub rec_lr: f64,
    pub rec_batch: usize,
    pub rec_blur_augment: f64,
    pub rec_val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data/desk.tpgd"),
            recognizer: PathBuf::from("runs/recognizer/recognizer.ckpt"),
            run_dir: PathBuf::from("runs/tpgsr"),
            model: ModelPreset::Standard,
            stages: 3,
            lambdas: None,
            share_sr: true,
            share_tpg: false,
            stop_grad: true,
            loss: LossConfig::default(),
            tuned: true,
            use_tp: true,
            batch: 48,
            epochs: 30,
            finetune_epochs: 10,
            lr: 1e-3,
            lr_halve_epoch: 20,
            precision: Precision::F32,
            grid_samples: 16,
            eval_every: 1,
            rec_epochs: 20,
            rec_lr: 1e-3,
            rec_batch: 32,
            rec_blur_augment: 0.9,
            rec_val_fraction: 0.1,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{key} = {value}`: {why}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, v, e))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "recognizer" => self.recognizer = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            "model" => {
                self.model = match v {
                    "standard" => ModelPreset::Standard,
                    "desk" => ModelPreset::Desk,
                    _ => return Err(bad(key, v, "expected standard or desk")),
                }
            }
            "stages" => self.stages = parse_num(key, v)?,
            "lambdas" => {
                self.lambdas = if v == "auto" {
                    None
                } else {
                    Some(v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?)
                }
            }
            "share_sr" => self.share_sr = parse_bool(key, v)?,
            "share_tpg" => self.share_tpg = parse_bool(key, v)?,
            "stop_grad" => self.stop_grad = parse_bool(key, v)?,
            "alpha" => self.loss.alpha = parse_num(key, v)?,
            "beta" => self.loss.beta = parse_num(key, v)?,
            "epsilon" => self.loss.epsilon = parse_num(key, v)?,
            "tuned" => self.tuned = parse_bool(key, v)?,
            "use_tp" => self.use_tp = parse_bool(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_halve_epoch" => self.lr_halve_epoch = parse_num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, v, "expected f32 or f64")),
                }
            }
            "grid_samples" => self.grid_samples = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "rec_epochs" => self.rec_epochs = parse_num(key, v)?,
            "rec_lr" => self.rec_lr = parse_num(key, v)?,
            "rec_batch" => self.rec_batch = parse_num(key, v)?,
            "rec_blur_augment" => self.rec_blur_augment = parse_num(key, v)?,
            "rec_val_fraction" => self.rec_val_fraction = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn resolved_lambdas(&self) -> Result<Vec<f64>> {
        match &self.lambdas {
            Some(l) => Ok(l.clone()),
            None => default_lambdas(self.stages),
        }
    }

    pub fn plan(&self) -> Result<StagePlan> {
        let mut plan = StagePlan::new(self.stages, self.resolved_lambdas()?)?;
        plan.share_sr = self.share_sr;
        plan.share_tpg = self.share_tpg;
        plan.stop_grad = self.stop_grad;
        Ok(plan)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.config()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.rec_epochs,
            lr: self.rec_lr,
            batch: self.rec_batch,
            val_fraction: self.rec_val_fraction,
            seed: self.seed,
            blur_augment: self.rec_blur_augment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        self.loss.validate()?;
        if self.batch == 0 || self.rec_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.rec_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rec_val_fraction) {
            return Err(Error::Config("rec_val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Fully resolved config in the input format; parsing it gives back `self`
    /// (with derived stage weights made explicit).
    pub fn echo(&self) -> String {
        let lambdas = self
            .resolved_lambdas()
            .map(|l| l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_else(|_| "auto".into());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.display().to_string());
        kv("recognizer", self.recognizer.display().to_string());
        kv("run_dir", self.run_dir.display().to_string());
        kv("model", match self.model {
            ModelPreset::Standard => "standard",
            ModelPreset::Desk => "desk",
        }
        .into());
        kv("stages", self.stages.to_string());
        kv("lambdas", lambdas);
        kv("share_sr", self.share_sr.to_string());
        kv("share_tpg", self.share_tpg.to_string());
        kv("stop_grad", self.stop_grad.to_string());
        kv("alpha", self.loss.alpha.to_string());
        kv("beta", self.loss.beta.to_string());
        kv("epsilon", self.loss.epsilon.to_string());
        kv("tuned", self.tuned.to_string());
        kv("use_tp", self.use_tp.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_halve_epoch", self.lr_halve_epoch.to_string());
        kv("precision", match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
        .into());
        kv("grid_samples", self.grid_samples.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("rec_epochs", self.rec_epochs.to_string());
        kv("rec_lr", self.rec_lr.to_string());
        kv("rec_batch", self.rec_batch.to_string());
        kv("rec_blur_augment", self.rec_blur_augment.to_string());
        kv("rec_val_fraction", self.rec_val_fraction.to_string());
        s
    }

    /// Hex SHA-256 of the settings that influence training, excluding paths.
    pub fn hash(&self) -> String {
        let echo: String = self
            .echo()
            .lines()
            .filter(|l| !["dataset", "recognizer", "run_dir"].iter().any(|k| l.starts_with(k)))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(echo.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Learning rate for a 1-based epoch within a phase.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halve_epoch > 0 && epoch >= self.lr_halve_epoch {
            self.lr * 0.5
        } else {
            self.lr
        }
    }
}

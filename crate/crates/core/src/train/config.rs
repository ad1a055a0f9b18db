use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};
use crate::losses::{AdversarialForm, LossWeights};
use crate::nets::{ModelKind, NetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub crop: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub data_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub net: NetConfig,
    pub adversarial: AdversarialForm,
    pub dark_patch: usize,
    /// Random horizontal flips on top of random crops.
    pub flip: bool,
    /// Linear decay to zero over the second half of training.
    pub lr_decay: bool,
    /// Pre-scale noisy inputs by the synthesis `f_scale` recorded in the
    /// manifest instead of the estimated exposure ratio.
    pub true_exposure: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Rnn,
            learning_rate: 2e-4,
            beta1: 0.5,
            epochs: 10,
            crop: 256,
            batch_size: 4,
            init_std: 0.02,
            seed: 0,
            loss_weights: LossWeights::default(),
            data_root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            net: NetConfig::default(),
            adversarial: AdversarialForm::Literal,
            dark_patch: crate::imgproc::DEFAULT_DARK_PATCH,
            flip: true,
            lr_decay: false,
            true_exposure: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| invalid!("config key {key}: cannot parse '{value}': {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(invalid!("config key {key}: expected a boolean, got '{value}'")),
    }
}

/// Reads `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid!("config line {}: expected 'key = value', got '{raw}'", n + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl TrainConfig {
    /// Small networks and 64×64 crops.
    pub fn toy() -> Self {
        TrainConfig {
            crop: 64,
            net: NetConfig::toy(64),
            ..TrainConfig::default()
        }
    }

    /// Applies one `key = value` setting. Returns `false` for keys that do not
    /// belong to the training configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let w = &mut self.loss_weights;
        let n = &mut self.net;
        match key {
            "model" => self.model = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "crop" => {
                self.crop = parse(key, value)?;
                n.disc_input_size = self.crop;
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lambda_c1" => w.lambda_c1 = parse(key, value)?,
            "lambda_c2" => w.lambda_c2 = parse(key, value)?,
            "lambda_grad" => w.lambda_grad = parse(key, value)?,
            "lambda_dc" => w.lambda_dc = parse(key, value)?,
            "data_root" | "data" => self.data_root = PathBuf::from(value),
            "checkpoint_dir" | "out" => self.checkpoint_dir = PathBuf::from(value),
            "adversarial" => {
                self.adversarial = match value {
                    "literal" => AdversarialForm::Literal,
                    "non-saturating" | "non_saturating" => AdversarialForm::NonSaturating,
                    _ => return Err(invalid!("adversarial must be literal or non_saturating")),
                }
            }
            "dark_patch" => self.dark_patch = parse(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "lr_decay" => self.lr_decay = parse_bool(key, value)?,
            "true_exposure" => self.true_exposure = parse_bool(key, value)?,
            "encoder_depth" => n.encoder_depth = parse(key, value)?,
            "channel_schedule" => n.channel_schedule = parse_list(key, value)?,
            "kernel_size" => n.kernel_size = parse(key, value)?,
            "stride" => n.stride = parse(key, value)?,
            "leaky_slope" => n.leaky_slope = parse(key, value)?,
            "dropout_rate" => n.dropout_rate = parse(key, value)?,
            "dropout_layers" => n.dropout_layers = parse(key, value)?,
            "lstm_channels" => n.lstm_channels = parse(key, value)?,
            "lstm_kernel" => n.lstm_kernel = parse(key, value)?,
            "use_spectral_norm" => n.use_spectral_norm = parse_bool(key, value)?,
            "disc_schedule" => n.disc_schedule = parse_list(key, value)?,
            "bn_momentum" => n.bn_momentum = parse(key, value)?,
            "preset" => match value {
                "toy" => {
                    let keep = (
                        self.model,
                        self.seed,
                        self.data_root.clone(),
                        self.checkpoint_dir.clone(),
                    );
                    *self = TrainConfig::toy();
                    (self.model, self.seed, self.data_root, self.checkpoint_dir) = keep;
                }
                "paper" => {
                    self.net = NetConfig {
                        disc_input_size: self.crop,
                        ..NetConfig::default()
                    }
                }
                _ => return Err(invalid!("preset must be toy or paper")),
            },
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies every known key of `kv`; unknown keys are logged and ignored.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        if let Some(p) = kv.get("preset") {
            self.set("preset", p)?;
        }
        for (k, v) in kv.iter().filter(|(k, _)| k.as_str() != "preset") {
            if !self.set(k, v)? {
                log::debug!("ignoring config key {k} for training");
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        super::adam::check_hyper(self.learning_rate, self.beta1)?;
        self.net.validate()?;
        self.loss_weights.validate()?;
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(
            self.init_std > 0.0 && self.init_std.is_finite(),
            "init_std must be positive"
        );
        ensure!(self.dark_patch >= 1, "dark_patch must be at least 1");
        let m = self.net.size_multiple();
        ensure!(
            self.crop > 0 && self.crop.is_multiple_of(m),
            "crop {} is not divisible by {m}",
            self.crop
        );
        ensure!(
            self.crop == self.net.disc_input_size,
            "crop {} differs from the discriminator input size {}",
            self.crop,
            self.net.disc_input_size
        );
        Ok(())
    }
}

//! Plain-text `key=value` configuration covering the model, the training
//! schedule, and the loss weights. `#` starts a comment; later keys
//! override earlier ones.

use std::path::Path;

use crate::model::ModelConfig;
use crate::train::{LossConfig, TrainSchedule};
use crate::{Error, Result};

/// Everything configurable from a file or flag overrides.
#[derive(Debug, Clone, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArg(format!("bad value for {key}: {value:?}")))
}

impl Config {
    /// Set one field by key. Unknown keys are errors so typos surface.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_in" => self.model.d_in = parse(key, value)?,
            "d_model" => self.model.d_model = parse(key, value)?,
            "n_enc_blocks" => self.model.n_enc_blocks = parse(key, value)?,
            "n_dec_blocks" => self.model.n_dec_blocks = parse(key, value)?,
            "kernel" => self.model.kernel = parse(key, value)?,
            "slope" => self.model.slope = parse(key, value)?,
            "max_consec" => self.model.max_consec = parse(key, value)?,
            "learning_rate" => self.schedule.learning_rate = parse(key, value)?,
            "max_epochs" => self.schedule.max_epochs = parse(key, value)?,
            "warmup_epochs" => self.schedule.warmup_epochs = parse(key, value)?,
            "threshold_low" => self.schedule.threshold_low = parse(key, value)?,
            "threshold_high" => self.schedule.threshold_high = parse(key, value)?,
            "seed" => self.schedule.seed = parse(key, value)?,
            "grad_accum" => self.schedule.grad_accum = parse(key, value)?,
            "augment" => self.schedule.augment = parse(key, value)?,
            "map_soft_branch" => self.schedule.map_soft_branch = parse(key, value)?,
            "lambda_rec" => self.loss.lambda_rec = parse(key, value)?,
            "lambda_len" => self.loss.lambda_len = parse(key, value)?,
            _ => return Err(Error::InvalidArg(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.loss.validate()
    }
}

/// Parse config text. Unknown keys and malformed lines are errors.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArg(format!(
                "config line {}: expected key=value, got {line:?}",
                lineno + 1
            ))
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Render a config with every key present, parseable by [`parse_config`].
pub fn render_config(cfg: &Config) -> String {
    format!(
        "d_in={}\nd_model={}\nn_enc_blocks={}\nn_dec_blocks={}\nkernel={}\nslope={}\nmax_consec={}\n\
         learning_rate={}\nmax_epochs={}\nwarmup_epochs={}\nthreshold_low={}\nthreshold_high={}\n\
         seed={}\ngrad_accum={}\naugment={}\nmap_soft_branch={}\nlambda_rec={}\nlambda_len={}\n",
        cfg.model.d_in,
        cfg.model.d_model,
        cfg.model.n_enc_blocks,
        cfg.model.n_dec_blocks,
        cfg.model.kernel,
        cfg.model.slope,
        cfg.model.max_consec,
        cfg.schedule.learning_rate,
        cfg.schedule.max_epochs,
        cfg.schedule.warmup_epochs,
        cfg.schedule.threshold_low,
        cfg.schedule.threshold_high,
        cfg.schedule.seed,
        cfg.schedule.grad_accum,
        cfg.schedule.augment,
        cfg.schedule.map_soft_branch,
        cfg.loss.lambda_rec,
        cfg.loss.lambda_len,
    )
}

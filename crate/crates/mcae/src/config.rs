//! Flat key=value configuration covering every tunable in the pipeline.
//!
//! The on-disk format is one `section.field = value` pair per line, `#`
//! comments, blank lines ignored. Every run writes its fully-resolved
//! configuration back in this format, so any result directory contains the
//! exact settings that produced it and can be re-run from that file alone.
//! Serialization is deterministic (fixed key order, shortest round-trip
//! float formatting), and `parse(render(c)) == c` exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::model::{DecoderConfig, EncoderConfig};
use crate::trainer::{FinetuneConfig, ScheduleConfig};

/// Every tunable of the pipeline in one place: model geometry, contrastive
/// weights, pre-training schedule, and fine-tuning settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FullConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub contrastive: ContrastiveConfig,
    pub schedule: ScheduleConfig,
    pub finetune: FinetuneConfig,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            encoder: EncoderConfig::vit_tiny(),
            decoder: DecoderConfig::default_size(),
            contrastive: ContrastiveConfig::default(),
            schedule: ScheduleConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

impl FullConfig {
    /// Set one field by its dotted key. Unknown keys are an error, so
    /// typos surface instead of silently using a default.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoder.embed_dim" => self.encoder.embed_dim = parse_value(key, value)?,
            "encoder.depth" => self.encoder.depth = parse_value(key, value)?,
            "encoder.heads" => self.encoder.heads = parse_value(key, value)?,
            "encoder.patch_size" => self.encoder.patch_size = parse_value(key, value)?,
            "encoder.image_size" => self.encoder.image_size = parse_value(key, value)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse_value(key, value)?,

            "decoder.width" => self.decoder.width = parse_value(key, value)?,
            "decoder.depth" => self.decoder.depth = parse_value(key, value)?,
            "decoder.heads" => self.decoder.heads = parse_value(key, value)?,

            "contrastive.temperature" => self.contrastive.temperature = parse_value(key, value)?,
            "contrastive.lambda_live_cross" => {
                self.contrastive.lambda_live_cross = parse_value(key, value)?;
            }
            "contrastive.lambda_live_same" => {
                self.contrastive.lambda_live_same = parse_value(key, value)?;
            }
            "contrastive.lambda_spoof" => self.contrastive.lambda_spoof = parse_value(key, value)?,
            "contrastive.include_spoof_positives" => {
                self.contrastive.include_spoof_positives = parse_value(key, value)?;
            }

            "schedule.epochs" => self.schedule.epochs = parse_value(key, value)?,
            "schedule.batch_size" => self.schedule.batch_size = parse_value(key, value)?,
            "schedule.mask_ratio" => self.schedule.mask_ratio = parse_value(key, value)?,
            "schedule.learning_rate" => self.schedule.learning_rate = parse_value(key, value)?,
            "schedule.weight_decay" => self.schedule.weight_decay = parse_value(key, value)?,
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = parse_value(key, value)?,
            "schedule.beta" => self.schedule.beta = parse_value(key, value)?,
            "schedule.epsilon" => self.schedule.epsilon = parse_value(key, value)?,
            "schedule.switch_epoch" => {
                self.schedule.switch_epoch = if value == "none" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                };
            }
            "schedule.gate_mode" => self.schedule.gate_mode = value.parse()?,
            "schedule.ema_decay" => self.schedule.ema_decay = parse_value(key, value)?,
            "schedule.seed" => self.schedule.seed = parse_value(key, value)?,

            "finetune.epochs" => self.finetune.epochs = parse_value(key, value)?,
            "finetune.batch_size" => self.finetune.batch_size = parse_value(key, value)?,
            "finetune.learning_rate" => self.finetune.learning_rate = parse_value(key, value)?,
            "finetune.weight_decay" => self.finetune.weight_decay = parse_value(key, value)?,
            "finetune.warmup_epochs" => self.finetune.warmup_epochs = parse_value(key, value)?,
            "finetune.head_only" => self.finetune.head_only = parse_value(key, value)?,
            "finetune.crop_scale_min" => self.finetune.crop_scale.0 = parse_value(key, value)?,
            "finetune.crop_scale_max" => self.finetune.crop_scale.1 = parse_value(key, value)?,
            "finetune.seed" => self.finetune.seed = parse_value(key, value)?,

            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Render in the fixed key order. Feeding the output back through
    /// [`FullConfig::parse`] reproduces the same configuration exactly.
    pub fn to_text(&self) -> String {
        let switch = match self.schedule.switch_epoch {
            None => "none".to_string(),
            Some(e) => e.to_string(),
        };
        format!(
            "# model geometry\n\
             encoder.embed_dim = {}\n\
             encoder.depth = {}\n\
             encoder.heads = {}\n\
             encoder.patch_size = {}\n\
             encoder.image_size = {}\n\
             encoder.mlp_ratio = {}\n\
             decoder.width = {}\n\
             decoder.depth = {}\n\
             decoder.heads = {}\n\
             # contrastive objective\n\
             contrastive.temperature = {}\n\
             contrastive.lambda_live_cross = {}\n\
             contrastive.lambda_live_same = {}\n\
             contrastive.lambda_spoof = {}\n\
             contrastive.include_spoof_positives = {}\n\
             # pre-training schedule\n\
             schedule.epochs = {}\n\
             schedule.batch_size = {}\n\
             schedule.mask_ratio = {}\n\
             schedule.learning_rate = {}\n\
             schedule.weight_decay = {}\n\
             schedule.warmup_epochs = {}\n\
             schedule.beta = {}\n\
             schedule.epsilon = {}\n\
             schedule.switch_epoch = {}\n\
             schedule.gate_mode = {}\n\
             schedule.ema_decay = {}\n\
             schedule.seed = {}\n\
             # fine-tuning\n\
             finetune.epochs = {}\n\
             finetune.batch_size = {}\n\
             finetune.learning_rate = {}\n\
             finetune.weight_decay = {}\n\
             finetune.warmup_epochs = {}\n\
             finetune.head_only = {}\n\
             finetune.crop_scale_min = {}\n\
             finetune.crop_scale_max = {}\n\
             finetune.seed = {}\n",
            self.encoder.embed_dim,
            self.encoder.depth,
            self.encoder.heads,
            self.encoder.patch_size,
            self.encoder.image_size,
            self.encoder.mlp_ratio,
            self.decoder.width,
            self.decoder.depth,
            self.decoder.heads,
            self.contrastive.temperature,
            self.contrastive.lambda_live_cross,
            self.contrastive.lambda_live_same,
            self.contrastive.lambda_spoof,
            self.contrastive.include_spoof_positives,
            self.schedule.epochs,
            self.schedule.batch_size,
            self.schedule.mask_ratio,
            self.schedule.learning_rate,
            self.schedule.weight_decay,
            self.schedule.warmup_epochs,
            self.schedule.beta,
            self.schedule.epsilon,
            switch,
            self.schedule.gate_mode,
            self.schedule.ema_decay,
            self.schedule.seed,
            self.finetune.epochs,
            self.finetune.batch_size,
            self.finetune.learning_rate,
            self.finetune.weight_decay,
            self.finetune.warmup_epochs,
            self.finetune.head_only,
            self.finetune.crop_scale.0,
            self.finetune.crop_scale.1,
            self.finetune.seed,
        )
    }

    /// Parse a config text: defaults overlaid with each `key = value` line.
    pub fn parse(text: &str) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<FullConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FullConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Validate every section, including cross-field rules.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.contrastive.validate()?;
        self.schedule.validate()?;
        self.finetune.validate()
    }
}

//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error that lists every valid key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::LossWeights;
use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::synthdata::SceneSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SceneSpec,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch_size",
    "warmup_frac",
    "alpha_min",
    "alpha_max",
    "lr",
    "weight_decay",
    "lr_drop_frac",
    "lr_drop_factor",
    "eval_interval",
    "eval_scenes",
    "train_scenes",
    "eval_seed",
    "layers",
    "heads",
    "d_model",
    "queries",
    "d_ffn",
    "encoder_layers",
    "routing",
    "suppressor",
    "delegator",
    "d_z",
    "rank",
    "gate_rank",
    "gamma_init",
    "lambda_cls",
    "lambda_l1",
    "lambda_giou",
    "background_weight",
    "image_size",
    "patch_size",
    "classes",
    "min_objects",
    "max_objects",
    "min_side",
    "max_side",
    "max_iou",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} must be on or off, got {value:?}"
        ))),
    }
}

impl RunConfig {
    /// Sets one key; the decoder's class count and memory layout follow the data keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, d, t, l) = (
            &mut self.model,
            &mut self.data,
            &mut self.train,
            &mut self.loss,
        );
        match key {
            "seed" => t.seed = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "warmup_frac" => t.warmup_frac = parse(key, value)?,
            "alpha_min" => t.alpha_min = parse(key, value)?,
            "alpha_max" => t.alpha_max = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "lr_drop_frac" => t.lr_drop_frac = parse(key, value)?,
            "lr_drop_factor" => t.lr_drop_factor = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "eval_scenes" => t.eval_scenes = parse(key, value)?,
            "train_scenes" => t.train_scenes = parse(key, value)?,
            "eval_seed" => t.eval_seed = parse(key, value)?,
            "layers" => m.decoder.layers = parse(key, value)?,
            "heads" => m.decoder.heads = parse(key, value)?,
            "d_model" => m.decoder.d_model = parse(key, value)?,
            "queries" => m.decoder.queries = parse(key, value)?,
            "d_ffn" => m.decoder.d_ffn = parse(key, value)?,
            "encoder_layers" => m.decoder.encoder_layers = parse(key, value)?,
            "routing" => m.routing_enabled = parse_switch(key, value)?,
            "suppressor" => m.switch.suppressor = parse_switch(key, value)?,
            "delegator" => m.switch.delegator = parse_switch(key, value)?,
            "d_z" => m.routing.d_z = parse(key, value)?,
            "rank" => m.routing.rank = parse(key, value)?,
            "gate_rank" => m.routing.gate_rank = parse(key, value)?,
            "gamma_init" => m.routing.gamma_init = parse(key, value)?,
            "lambda_cls" => l.cls = parse(key, value)?,
            "lambda_l1" => l.l1 = parse(key, value)?,
            "lambda_giou" => l.giou = parse(key, value)?,
            "background_weight" => l.background = parse(key, value)?,
            "image_size" => d.image_size = parse(key, value)?,
            "patch_size" => d.patch_size = parse(key, value)?,
            "classes" => d.classes = parse(key, value)?,
            "min_objects" => d.min_objects = parse(key, value)?,
            "max_objects" => d.max_objects = parse(key, value)?,
            "min_side" => d.min_side = parse(key, value)?,
            "max_side" => d.max_side = parse(key, value)?,
            "max_iou" => d.max_iou = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.model.decoder.classes = self.data.classes;
        if self.data.patch_size > 0 {
            self.model.decoder.grid = self.data.grid();
        }
        self.model.decoder.patch_dim = self.data.patch_dim();
        self.data.seed = self.train.seed;
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.max_objects > self.model.decoder.queries {
            return Err(Error::Config(format!(
                "{} queries cannot cover up to {} objects",
                self.model.decoder.queries, self.data.max_objects
            )));
        }
        Ok(())
    }

    /// Renders every key in `KEYS` order; parsing the output reproduces `self`.
    pub fn to_key_values(&self) -> String {
        let (m, d, t, l) = (&self.model, &self.data, &self.train, &self.loss);
        let sw = |b: bool| if b { "on" } else { "off" };
        let values: Vec<String> = vec![
            t.seed.to_string(),
            t.steps.to_string(),
            t.batch_size.to_string(),
            t.warmup_frac.to_string(),
            t.alpha_min.to_string(),
            t.alpha_max.to_string(),
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.lr_drop_frac.to_string(),
            t.lr_drop_factor.to_string(),
            t.eval_interval.to_string(),
            t.eval_scenes.to_string(),
            t.train_scenes.to_string(),
            t.eval_seed.to_string(),
            m.decoder.layers.to_string(),
            m.decoder.heads.to_string(),
            m.decoder.d_model.to_string(),
            m.decoder.queries.to_string(),
            m.decoder.d_ffn.to_string(),
            m.decoder.encoder_layers.to_string(),
            sw(m.routing_enabled).into(),
            sw(m.switch.suppressor).into(),
            sw(m.switch.delegator).into(),
            m.routing.d_z.to_string(),
            m.routing.rank.to_string(),
            m.routing.gate_rank.to_string(),
            m.routing.gamma_init.to_string(),
            l.cls.to_string(),
            l.l1.to_string(),
            l.giou.to_string(),
            l.background.to_string(),
            d.image_size.to_string(),
            d.patch_size.to_string(),
            d.classes.to_string(),
            d.min_objects.to_string(),
            d.max_objects.to_string(),
            d.min_side.to_string(),
            d.max_side.to_string(),
            d.max_iou.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let cfg =
            RunConfig::parse_str("# toy\n\nsteps = 10\n routing=off \nclasses = 4\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert!(!cfg.model.routing_enabled);
        assert_eq!(cfg.model.decoder.classes, 4);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse_str("stepz = 3").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("stepz") && err.contains("warmup_frac"));
        assert!(RunConfig::parse_str("steps").is_err());
        assert!(RunConfig::parse_str("routing = maybe").is_err());
    }

    #[test]
    fn key_value_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("gamma_init", "-30").unwrap();
        cfg.set("delegator", "off").unwrap();
        cfg.set("lr", "0.0003").unwrap();
        assert_eq!(RunConfig::parse_str(&cfg.to_key_values()).unwrap(), cfg);
    }
}

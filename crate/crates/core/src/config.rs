//! Flat `key = value` run configuration with `lpm.*`, `side.*`, `train.*`
//! and `data.*` keys. Blank lines and `#` comments are ignored; unknown keys
//! are errors.

use std::path::Path;
use std::str::FromStr;

use crate::adapter::{FptConfig, Selection};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: FptConfig,
    pub train: TrainConfig,
    /// Seed of the LPM weights made by `init-lpm`.
    pub lpm_seed: u64,
    /// Seed of the side-network initialization.
    pub side_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: FptConfig::default(),
            train: TrainConfig::default(),
            lpm_seed: 0,
            side_seed: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "lpm.high_res" => m.high_res = num(key, v)?,
            "lpm.patch_size" => m.patch_size = num(key, v)?,
            "lpm.channels" => m.channels = num(key, v)?,
            "lpm.layers" => m.lpm_layers = num(key, v)?,
            "lpm.dim" => m.lpm_dim = num(key, v)?,
            "lpm.heads" => m.heads = num(key, v)?,
            "lpm.mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "lpm.seed" => self.lpm_seed = num(key, v)?,
            "side.low_res" => m.low_res = num(key, v)?,
            "side.layers" => m.side_layers = num(key, v)?,
            "side.reduction" => m.reduction = num(key, v)?,
            "side.prompts" => m.prompts = num(key, v)?,
            "side.token_ratio" => m.token_ratio = num(key, v)?,
            "side.selection" => m.selection = Selection::parse(v)?,
            "side.selection_seed" => m.selection_seed = num(key, v)?,
            "side.fusion" => m.fusion = flag(key, v)?,
            "side.seed" => self.side_seed = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr_max" => t.lr_max = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.beta1" => t.betas.0 = num(key, v)?,
            "train.beta2" => t.betas.1 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.augment" => t.augment = flag(key, v)?,
            "data.classes" => m.classes = num(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, in a form [`RunConfig::parse`]
    /// reads back to an equal configuration.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let lines = [
            ("lpm.high_res", m.high_res.to_string()),
            ("lpm.patch_size", m.patch_size.to_string()),
            ("lpm.channels", m.channels.to_string()),
            ("lpm.layers", m.lpm_layers.to_string()),
            ("lpm.dim", m.lpm_dim.to_string()),
            ("lpm.heads", m.heads.to_string()),
            ("lpm.mlp_ratio", m.mlp_ratio.to_string()),
            ("lpm.seed", self.lpm_seed.to_string()),
            ("side.low_res", m.low_res.to_string()),
            ("side.layers", m.side_layers.to_string()),
            ("side.reduction", m.reduction.to_string()),
            ("side.prompts", m.prompts.to_string()),
            ("side.token_ratio", m.token_ratio.to_string()),
            ("side.selection", m.selection.name().to_string()),
            ("side.selection_seed", m.selection_seed.to_string()),
            ("side.fusion", m.fusion.to_string()),
            ("side.seed", self.side_seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.betas.0.to_string()),
            ("train.beta2", t.betas.1.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.augment", t.augment.to_string()),
            ("data.classes", m.classes.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

//! `key = value` configuration files for the model and the training run.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub level_dims: usize,
    pub enc_channels: usize,
    pub iframe_dec_channels: usize,
    pub flow_dec_channels: usize,
    pub residue_dec_channels: usize,
    pub inner_convs: usize,
    pub q0_channels: usize,
    pub q1_channels: usize,
    pub hyper_channels: usize,
    pub state_channels: usize,
    pub predictor_channels: usize,
    pub predictor_depth: usize,
    pub predictor_enabled: bool,
    pub pyramid_levels: usize,
    pub base_sigma: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            level_dims: 4,
            enc_channels: 32,
            iframe_dec_channels: 16,
            flow_dec_channels: 8,
            residue_dec_channels: 16,
            inner_convs: 3,
            q0_channels: 32,
            q1_channels: 16,
            hyper_channels: 16,
            state_channels: 32,
            predictor_channels: 16,
            predictor_depth: 2,
            predictor_enabled: true,
            pyramid_levels: 5,
            base_sigma: 1.0,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    /// A very small model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            enc_channels: 4,
            iframe_dec_channels: 3,
            flow_dec_channels: 2,
            residue_dec_channels: 3,
            inner_convs: 2,
            q0_channels: 4,
            q1_channels: 2,
            hyper_channels: 3,
            state_channels: 3,
            predictor_channels: 3,
            predictor_depth: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.level_dims < 2 {
            return Err(Error::Config("levels and level_dims must be at least 2".into()));
        }
        if self.levels > 255 || self.level_dims > 255 {
            return Err(Error::Config("levels and level_dims must fit in a byte".into()));
        }
        if self.pyramid_levels < 1 || self.base_sigma <= 0.0 {
            return Err(Error::Config("pyramid needs >= 1 level and a positive base sigma".into()));
        }
        let counts = [
            self.enc_channels,
            self.iframe_dec_channels,
            self.flow_dec_channels,
            self.residue_dec_channels,
            self.inner_convs,
            self.q0_channels,
            self.q1_channels,
            self.hyper_channels,
            self.state_channels,
            self.predictor_channels,
            self.predictor_depth,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("channel counts and depths must be positive".into()));
        }
        Ok(())
    }

    /// Numeric form stored alongside the weights.
    pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("levels", self.levels as f64),
            ("level_dims", self.level_dims as f64),
            ("enc_channels", self.enc_channels as f64),
            ("iframe_dec_channels", self.iframe_dec_channels as f64),
            ("flow_dec_channels", self.flow_dec_channels as f64),
            ("residue_dec_channels", self.residue_dec_channels as f64),
            ("inner_convs", self.inner_convs as f64),
            ("q0_channels", self.q0_channels as f64),
            ("q1_channels", self.q1_channels as f64),
            ("hyper_channels", self.hyper_channels as f64),
            ("state_channels", self.state_channels as f64),
            ("predictor_channels", self.predictor_channels as f64),
            ("predictor_depth", self.predictor_depth as f64),
            ("predictor_enabled", self.predictor_enabled as u8 as f64),
            ("pyramid_levels", self.pyramid_levels as f64),
            ("base_sigma", self.base_sigma),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| -> Result<usize> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.fract() == 0.0 && *x >= 0.0)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        match key {
            "levels" => self.levels = int(value)?,
            "level_dims" => self.level_dims = int(value)?,
            "enc_channels" => self.enc_channels = int(value)?,
            "iframe_dec_channels" => self.iframe_dec_channels = int(value)?,
            "flow_dec_channels" => self.flow_dec_channels = int(value)?,
            "residue_dec_channels" => self.residue_dec_channels = int(value)?,
            "inner_convs" => self.inner_convs = int(value)?,
            "q0_channels" => self.q0_channels = int(value)?,
            "q1_channels" => self.q1_channels = int(value)?,
            "hyper_channels" => self.hyper_channels = int(value)?,
            "state_channels" => self.state_channels = int(value)?,
            "predictor_channels" => self.predictor_channels = int(value)?,
            "predictor_depth" => self.predictor_depth = int(value)?,
            "predictor_enabled" => self.predictor_enabled = parse_bool(key, value)?,
            "pyramid_levels" => self.pyramid_levels = int(value)?,
            "base_sigma" => self.base_sigma = parse_f64(key, value)?,
            "init_seed" => self.init_seed = int(value)? as u64,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from stored numeric pairs; missing keys keep defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, f64>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            let text = if k == "predictor_enabled" {
                (if *v != 0.0 { "true" } else { "false" }).to_string()
            } else {
                v.to_string()
            };
            if !cfg.set(k, &text)? {
                return Err(Error::Format(format!("unknown model config key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub clip_frames: usize,
    pub learning_rate: f64,
    pub lambda_first: f64,
    pub lambda_last: f64,
    pub modulator: bool,
    pub modulator_warmup: u64,
    pub epoch_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 5000,
            batch: 4,
            crop: 64,
            clip_frames: 4,
            learning_rate: 1e-4,
            lambda_first: 10f64.powf(-1.5),
            lambda_last: 10f64.powf(-3.5),
            modulator: true,
            modulator_warmup: 200,
            epoch_steps: 250,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch == 0 || self.epoch_steps == 0 {
            return Err(Error::Config("steps, batch and epoch_steps must be positive".into()));
        }
        if self.clip_frames < 1 || self.crop < 16 || self.crop % 16 != 0 {
            return Err(Error::Config("clip_frames >= 1 and crop a positive multiple of 16 required".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_first > 0.0) || !(self.lambda_last > 0.0) {
            return Err(Error::Config("learning rate and lambdas must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.model.set(key, value)? {
            return Ok(true);
        }
        let int = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        match key {
            "steps" => self.steps = int(value)?,
            "batch" => self.batch = int(value)?,
            "crop" => self.crop = int(value)?,
            "clip_frames" => self.clip_frames = int(value)?,
            "learning_rate" => self.learning_rate = parse_f64(key, value)?,
            "lambda_first" => self.lambda_first = parse_f64(key, value)?,
            "lambda_last" => self.lambda_last = parse_f64(key, value)?,
            "modulator" => self.modulator = parse_bool(key, value)?,
            "modulator_warmup" => self.modulator_warmup = int(value)? as u64,
            "epoch_steps" => self.epoch_steps = int(value)?,
            "seed" => self.seed = int(value)? as u64,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = TrainConfig::parse("# run\nsteps = 10\ncrop=32 # small\npredictor_enabled = false\nlambda_first = 0.05\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.crop, 32);
        assert!(!cfg.model.predictor_enabled);
        assert_eq!(cfg.lambda_first, 0.05);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(TrainConfig::parse("steps 10").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("crop = 20").is_err());
        assert!(TrainConfig::parse("levels = 1").is_err());
        assert!(TrainConfig::parse("learning_rate = nan").is_err());
    }

    #[test]
    fn model_pairs_roundtrip() {
        let mut cfg = ModelConfig::tiny();
        cfg.predictor_enabled = false;
        let map = cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let back = ModelConfig::from_pairs(&map).unwrap();
        assert_eq!(ModelConfig { init_seed: cfg.init_seed, ..back }, cfg);
    }
}

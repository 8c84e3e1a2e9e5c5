use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::STRIDE_MULTIPLE;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scale_decoder::DecoderOptions;

/// Training hyperparameters. Serialized as `key=value` lines; the same keys
/// are accepted as command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Square input sizes; one is drawn per window.
    pub scales: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub switch_every: usize,
    pub checkpoint_every: usize,
    /// Alternate with pseudo-videos built from the middle frame of each
    /// training sequence.
    pub pseudo_video: bool,
    pub taf_enabled: bool,
    pub sad_enabled: bool,
    pub target_residual: bool,
    pub scale_relative: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            iterations: 2000,
            scales: vec![64, 96, 128],
            batch_size: 1,
            seed: 0,
            switch_every: 128,
            checkpoint_every: 500,
            pseudo_video: false,
            taf_enabled: true,
            sad_enabled: true,
            target_residual: false,
            scale_relative: false,
        }
    }
}

pub const KEYS: [&str; 12] = [
    "learning_rate",
    "iterations",
    "scales",
    "batch_size",
    "seed",
    "switch_every",
    "checkpoint_every",
    "pseudo_video",
    "taf_enabled",
    "sad_enabled",
    "target_residual",
    "scale_relative",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "scales" => self.scales = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "switch_every" => self.switch_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "pseudo_video" => self.pseudo_video = parse(key, value)?,
            "taf_enabled" => self.taf_enabled = parse(key, value)?,
            "sad_enabled" => self.sad_enabled = parse(key, value)?,
            "target_residual" => self.target_residual = parse(key, value)?,
            "scale_relative" => self.scale_relative = parse(key, value)?,
            other => return Err(Error::validation(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `self`; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    /// Canonical `key=value` form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let scales: Vec<String> = self.scales.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "learning_rate={:e}", self.learning_rate);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "scales={}", scales.join(","));
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "switch_every={}", self.switch_every);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "pseudo_video={}", self.pseudo_video);
        let _ = writeln!(s, "taf_enabled={}", self.taf_enabled);
        let _ = writeln!(s, "sad_enabled={}", self.sad_enabled);
        let _ = writeln!(s, "target_residual={}", self.target_residual);
        let _ = writeln!(s, "scale_relative={}", self.scale_relative);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be at least 1"));
        }
        if self.scales.is_empty() {
            return Err(Error::validation("scales must not be empty"));
        }
        if let Some(s) = self.scales.iter().find(|&&s| s == 0 || s % STRIDE_MULTIPLE != 0) {
            return Err(Error::validation(format!(
                "scale {s} is not a positive multiple of {STRIDE_MULTIPLE}"
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("switch_every", self.switch_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            taf_enabled: self.taf_enabled,
            sad_enabled: self.sad_enabled,
            target_residual: self.target_residual,
            decoder: DecoderOptions {
                scale_relative: self.scale_relative,
                ..DecoderOptions::default()
            },
            ..ModelConfig::default()
        }
    }
}

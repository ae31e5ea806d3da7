//! Plain-text `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub code_dim: usize,
    pub epochs_a: usize,
    /// Trailing stage-A epochs drawn from the wild tier.
    pub wild_epochs_a: usize,
    pub epochs_b: usize,
    pub epochs_c: usize,
    pub batch_size: usize,
    pub max_views: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub flip_weight: f64,
    pub min_face_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// 0 = automatic.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            resolution: 64,
            base_channels: 16,
            code_dim: 128,
            epochs_a: 20,
            wild_epochs_a: 5,
            epochs_b: 20,
            epochs_c: 10,
            batch_size: 8,
            max_views: 6,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            flip_weight: 0.5,
            min_face_fraction: 0.10,
            val_fraction: 0.10,
            seed: 0,
            threads: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "resolution" => self.resolution = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "code_dim" => self.code_dim = parse(key, value)?,
            "epochs_a" => self.epochs_a = parse(key, value)?,
            "wild_epochs_a" => self.wild_epochs_a = parse(key, value)?,
            "epochs_b" => self.epochs_b = parse(key, value)?,
            "epochs_c" => self.epochs_c = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_views" => self.max_views = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "flip_weight" => self.flip_weight = parse(key, value)?,
            "min_face_fraction" => self.min_face_fraction = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=6).contains(&self.max_views) {
            return bad(format!("max_views {} outside 1..=6", self.max_views));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.wild_epochs_a > self.epochs_a {
            return bad("wild_epochs_a exceeds epochs_a".into());
        }
        if !(self.lr > 0.0 && self.eps > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..=1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.min_face_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if !(self.flip_weight >= 0.0) {
            return bad("flip_weight must be non-negative".into());
        }
        crate::nets::Widths::new(self.resolution, self.base_channels, self.code_dim)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("resolution", self.resolution.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("code_dim", self.code_dim.to_string());
        kv("epochs_a", self.epochs_a.to_string());
        kv("wild_epochs_a", self.wild_epochs_a.to_string());
        kv("epochs_b", self.epochs_b.to_string());
        kv("epochs_c", self.epochs_c.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_views", self.max_views.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("flip_weight", self.flip_weight.to_string());
        kv("min_face_fraction", self.min_face_fraction.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            base_channels: self.base_channels,
            code_dim: self.code_dim,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

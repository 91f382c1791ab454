//! Structured key-value configuration text shared by the CLI, trainer, and
//! checkpoint format. A config file is a flat list of `key = value` lines
//! with `#` comments; model keys and training keys live in the same file.
//! Checkpoints embed only the canonical model text, so a model config has
//! a stable byte representation and a one-byte id derived from it.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Result, SapmError};

/// Parsed `key = value` text.
#[derive(Debug, Clone, Default)]
pub struct KvText {
    map: BTreeMap<String, String>,
}

impl KvText {
    pub fn parse(text: &str) -> Result<KvText> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SapmError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(SapmError::config(format!(
                    "line {}: empty key or value",
                    lineno + 1
                )));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(SapmError::config(format!("duplicate key '{k}'")));
            }
        }
        Ok(KvText { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| SapmError::config(format!("key '{key}': cannot parse '{v}'"))),
        }
    }
}

/// Architecture hyperparameters. `levels` counts encoder transforms; the
/// first encoder layer and last decoder layer are plain (transposed)
/// convolutions, the rest are SAPM blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Base channel width.
    pub n: usize,
    /// Latent (y) channels.
    pub m: usize,
    /// Hyper latent (z) channels.
    pub hyper: usize,
    /// Encoder/decoder transform count, each stride 2.
    pub levels: usize,
    /// Laplace mixture components.
    pub kmix: usize,
    /// SAPM kernel size.
    pub kernel: usize,
    /// Shift exponent clamp range.
    pub p_min: i32,
    pub p_max: i32,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            n: 32,
            m: 32,
            hyper: 32,
            levels: 3,
            kmix: 3,
            kernel: 5,
            p_min: -8,
            p_max: 4,
            seed: 1,
        }
    }
}

const MODEL_KEYS: [&str; 9] = [
    "n", "m", "hyper", "levels", "kmix", "kernel", "p_min", "p_max", "seed",
];

impl ModelConfig {
    pub fn from_kv(kv: &KvText) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            n: kv.num("n", d.n)?,
            m: kv.num("m", d.m)?,
            hyper: kv.num("hyper", d.hyper)?,
            levels: kv.num("levels", d.levels)?,
            kmix: kv.num("kmix", d.kmix)?,
            kernel: kv.num("kernel", d.kernel)?,
            p_min: kv.num("p_min", d.p_min)?,
            p_max: kv.num("p_max", d.p_max)?,
            seed: kv.num("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let kv = KvText::parse(text)?;
        for k in kv.keys() {
            if !MODEL_KEYS.contains(&k) {
                return Err(SapmError::config(format!("unknown model key '{k}'")));
            }
        }
        ModelConfig::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(SapmError::config("levels must be at least 2"));
        }
        if !(1..=5).contains(&self.kmix) {
            return Err(SapmError::config("kmix must be in 1..=5"));
        }
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(SapmError::config("kernel must be odd and at least 3"));
        }
        if self.n == 0 || self.m == 0 || self.hyper == 0 {
            return Err(SapmError::config("channel counts must be positive"));
        }
        if self.p_min >= self.p_max {
            return Err(SapmError::config("p_min must be below p_max"));
        }
        Ok(())
    }

    /// Canonical byte representation embedded in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "n = {}\nm = {}\nhyper = {}\nlevels = {}\nkmix = {}\nkernel = {}\np_min = {}\np_max = {}\nseed = {}\n",
            self.n, self.m, self.hyper, self.levels, self.kmix, self.kernel, self.p_min,
            self.p_max, self.seed
        )
    }

    /// One-byte fingerprint of the canonical text (FNV-1a folded by xor),
    /// stored in bitstream headers to catch model/stream mismatches.
    pub fn id(&self) -> u8 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (0..8).fold(0u8, |acc, i| acc ^ (h >> (8 * i)) as u8)
    }

    /// Total downsampling factor from image to hyper latent.
    pub fn total_downsample(&self) -> usize {
        1 << (self.levels + 2)
    }
}

/// The paper's two lambda sets; the largest member of each trains from
/// scratch and seeds fine-tuning for the rest.
pub const LAMBDA_LOW: [f64; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
pub const LAMBDA_HIGH: [f64; 3] = [1024.0, 2048.0, 4096.0];

/// Training protocol role of one lambda value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Scratch,
    FineTuneFrom(f64),
}

/// Two-stage schedule: the largest lambda of whichever set contains
/// `lambda` trains from scratch; every other member fine-tunes from it.
/// Off-set lambdas train from scratch.
pub fn stage_for_lambda(lambda: f64) -> Stage {
    for set in [&LAMBDA_LOW[..], &LAMBDA_HIGH[..]] {
        let largest = *set.last().unwrap();
        if set.contains(&lambda) {
            return if lambda == largest {
                Stage::Scratch
            } else {
                Stage::FineTuneFrom(largest)
            };
        }
    }
    Stage::Scratch
}

/// Training run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch: usize,
    pub crop: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Checkpoint to fine-tune from; absent means training from scratch.
    pub pretrained: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lambda: 512.0,
            batch: 1,
            crop: 64,
            iters: 20_000,
            lr: 1e-4,
            seed: 1,
            dataset: PathBuf::new(),
            pretrained: None,
            log_every: 1,
        }
    }
}

const TRAIN_KEYS: [&str; 9] = [
    "lambda",
    "batch",
    "crop",
    "iters",
    "lr",
    "train_seed",
    "dataset",
    "pretrained",
    "log_every",
];

impl TrainConfig {
    pub fn from_kv(kv: &KvText) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lambda: kv.num("lambda", d.lambda)?,
            batch: kv.num("batch", d.batch)?,
            crop: kv.num("crop", d.crop)?,
            iters: kv.num("iters", d.iters)?,
            lr: kv.num("lr", d.lr)?,
            seed: kv.num("train_seed", d.seed)?,
            dataset: kv.get("dataset").map(PathBuf::from).unwrap_or(d.dataset),
            pretrained: kv.get("pretrained").map(PathBuf::from),
            log_every: kv.num("log_every", d.log_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.lr > 0.0) {
            return Err(SapmError::config("lambda and lr must be positive"));
        }
        if self.batch == 0 || self.iters == 0 || self.log_every == 0 {
            return Err(SapmError::config(
                "batch, iters, and log_every must be positive",
            ));
        }
        Ok(())
    }
}

/// Parse a combined config file; rejects keys that belong to no section.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let kv = KvText::parse(text)?;
    for k in kv.keys() {
        if !MODEL_KEYS.contains(&k) && !TRAIN_KEYS.contains(&k) {
            return Err(SapmError::config(format!("unknown config key '{k}'")));
        }
    }
    Ok((ModelConfig::from_kv(&kv)?, TrainConfig::from_kv(&kv)?))
}

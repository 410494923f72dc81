//! Run configuration: defaults, overridden by a `key = value` file,
//! overridden by command-line flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::reconstructor::SampleMode;
use crate::rerank::{DecodeOptions, RerankOptions};
use crate::trainer::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub stage: Stage,
    pub beam: usize,
    pub normalize_lik: bool,
    pub normalize_rec: bool,
    pub max_len_factor: f64,
    /// Cap on vocabulary size, reserved symbols included.
    pub vocab_size: usize,
    pub mode: SampleMode,
    pub bucket_width: usize,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            stage: Stage::Both,
            beam: 10,
            normalize_lik: false,
            normalize_rec: false,
            max_len_factor: 2.0,
            vocab_size: 30_000,
            mode: SampleMode::Greedy,
            bucket_width: 10,
            jobs: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "lambda",
        "epochs_stage1",
        "epochs_stage2",
        "batch_size",
        "rho",
        "eps",
        "clip_norm",
        "seed",
        "embed",
        "hidden",
        "dropout",
        "max_len",
        "checkpoint_every",
        "raw_sum_loss",
        "val_size",
        "precision",
        "stage",
        "beam",
        "normalize_lik",
        "normalize_rec",
        "max_len_factor",
        "vocab_size",
        "mode",
        "bucket_width",
        "jobs",
    ];

    /// Sets one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "lambda" => t.lambda = parse(key, value)?,
            "epochs_stage1" => t.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => t.epochs_stage2 = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "rho" => t.rho = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "embed" => t.embed = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "max_len" => t.max_len = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "raw_sum_loss" => t.raw_sum_loss = parse_bool(key, value)?,
            "val_size" => t.val_size = parse(key, value)?,
            "precision" => t.precision = value.parse()?,
            "stage" => self.stage = value.parse()?,
            "beam" => self.beam = parse(key, value)?,
            "normalize_lik" => self.normalize_lik = parse_bool(key, value)?,
            "normalize_rec" => self.normalize_rec = parse_bool(key, value)?,
            "max_len_factor" => {
                self.max_len_factor = parse(key, value)?;
                self.train.val_max_len_factor = self.max_len_factor;
            }
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "bucket_width" => self.bucket_width = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file's `key = value` lines (`#` starts a comment).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.beam < 1 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_len_factor.is_nan() || self.max_len_factor <= 0.0 {
            return Err(Error::Config("max_len_factor must be positive".into()));
        }
        if self.vocab_size <= crate::vocab::RESERVED.len() {
            return Err(Error::Config("vocab_size must exceed the reserved symbols".into()));
        }
        if self.bucket_width < 1 {
            return Err(Error::Config("bucket_width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            max_len_factor: self.max_len_factor,
            rerank: RerankOptions {
                lambda: self.train.lambda,
                normalize_lik: self.normalize_lik,
                normalize_rec: self.normalize_rec,
            },
        }
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "lambda" => t.lambda.to_string(),
            "epochs_stage1" => t.epochs_stage1.to_string(),
            "epochs_stage2" => t.epochs_stage2.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "rho" => t.rho.to_string(),
            "eps" => t.eps.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "seed" => t.seed.to_string(),
            "embed" => t.embed.to_string(),
            "hidden" => t.hidden.to_string(),
            "dropout" => t.dropout.to_string(),
            "max_len" => t.max_len.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "raw_sum_loss" => t.raw_sum_loss.to_string(),
            "val_size" => t.val_size.to_string(),
            "precision" => t.precision.to_string(),
            "stage" => self.stage.to_string(),
            "beam" => self.beam.to_string(),
            "normalize_lik" => self.normalize_lik.to_string(),
            "normalize_rec" => self.normalize_rec.to_string(),
            "max_len_factor" => self.max_len_factor.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "mode" => match self.mode {
                SampleMode::Greedy => "greedy".into(),
                SampleMode::Stochastic => "stochastic".into(),
            },
            "bucket_width" => self.bucket_width.to_string(),
            "jobs" => self.jobs.to_string(),
            _ => unreachable!("every key is listed"),
        }
    }
}

/// The effective configuration as a loadable config file.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in Self::KEYS {
            writeln!(f, "{k} = {}", self.get(k))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_precedence() {
        let mut c = RunConfig::default();
        assert_eq!(c.beam, 10);
        assert_eq!(c.train.lambda, 1.0);
        c.apply_text("# file layer\nbeam = 100\nlambda = 0.5  # trailing\nseed=9\n").unwrap();
        c.set("lambda", "0").unwrap();
        assert_eq!(c.beam, 100);
        assert_eq!(c.train.lambda, 0.0);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.embed, 32);
    }

    #[test]
    fn display_round_trips() {
        let mut c = RunConfig::default();
        c.set("stage", "2").unwrap();
        c.set("precision", "64").unwrap();
        c.set("mode", "stochastic").unwrap();
        c.set("max_len_factor", "1.5").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_string()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("beam = 3\nnonsense\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(c.apply_text("colour = blue").is_err());
        assert!(c.apply_text("beam = many").is_err());
        assert!(c.set("raw_sum_loss", "perhaps").is_err());
        c.set("beam", "0").unwrap();
        assert!(c.validate().is_err());
    }
}

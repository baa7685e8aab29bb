//! Run configuration stored as flat `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" | "float32" => Ok(Precision::F32),
            "f64" | "float64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub window: usize,
    pub stride: usize,
    pub clip_width: usize,
    pub tokens: usize,
    pub n_swaps: usize,
    pub n_blocks: usize,
    pub lambda_cl: f64,
    pub alpha: f64,
    pub color_jitter: bool,
    pub horizontal_flip: bool,
    pub precision: Precision,
    pub channels: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub masking: bool,
    pub csm_identity: bool,
    pub region_in_all_blocks: bool,
    pub share_region_encoder: bool,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    /// Consecutive-stride targets per sampled group; they share encoded frames.
    pub group_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 50,
            batch_size: 16,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            grad_clip: 1.0,
            window: 20,
            stride: 8,
            clip_width: 4,
            tokens: 2,
            n_swaps: 4,
            n_blocks: 2,
            lambda_cl: 0.1,
            alpha: 0.99,
            color_jitter: true,
            horizontal_flip: false,
            precision: Precision::F32,
            channels: 96,
            heads: 4,
            state_dim: 16,
            masking: true,
            csm_identity: false,
            region_in_all_blocks: true,
            share_region_encoder: false,
            steps_per_epoch: 100,
            group_size: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            window: self.window,
            stride: self.stride,
            clip_width: self.clip_width,
            tokens: self.tokens,
            heads: self.heads,
            n_swaps: self.n_swaps,
            masking: self.masking,
            n_blocks: self.n_blocks,
            state_dim: self.state_dim,
            region_in_all_blocks: self.region_in_all_blocks,
            share_region_encoder: self.share_region_encoder,
            csm_identity: self.csm_identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("stride", self.stride),
            ("clip_width", self.clip_width),
            ("channels", self.channels),
            ("heads", self.heads),
            ("state_dim", self.state_dim),
            ("steps_per_epoch", self.steps_per_epoch),
            ("group_size", self.group_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.clip_width > self.window {
            return Err(Error::Config(format!(
                "clip_width {} exceeds window {}",
                self.clip_width, self.window
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.batch_size % self.group_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} not divisible by group_size {}",
                self.batch_size, self.group_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda_cl >= 0.0 && self.lambda_cl.is_finite()) {
            return Err(Error::Config(format!("lambda_cl {} must be non-negative", self.lambda_cl)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip {} must be non-negative", self.grad_clip)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "clip_width" => self.clip_width = parse(key, value)?,
            "tokens" => self.tokens = parse(key, value)?,
            "n_swaps" => self.n_swaps = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "lambda_cl" => self.lambda_cl = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "color_jitter" => self.color_jitter = parse(key, value)?,
            "horizontal_flip" => self.horizontal_flip = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "state_dim" => self.state_dim = parse(key, value)?,
            "masking" => self.masking = parse(key, value)?,
            "csm_identity" => self.csm_identity = parse(key, value)?,
            "region_in_all_blocks" => self.region_in_all_blocks = parse(key, value)?,
            "share_region_encoder" => self.share_region_encoder = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", format!("{:e}", self.learning_rate));
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("window", self.window.to_string());
        put("stride", self.stride.to_string());
        put("clip_width", self.clip_width.to_string());
        put("tokens", self.tokens.to_string());
        put("n_swaps", self.n_swaps.to_string());
        put("n_blocks", self.n_blocks.to_string());
        put("lambda_cl", self.lambda_cl.to_string());
        put("alpha", self.alpha.to_string());
        put("color_jitter", self.color_jitter.to_string());
        put("horizontal_flip", self.horizontal_flip.to_string());
        put("precision", self.precision.as_str().to_string());
        put("channels", self.channels.to_string());
        put("heads", self.heads.to_string());
        put("state_dim", self.state_dim.to_string());
        put("masking", self.masking.to_string());
        put("csm_identity", self.csm_identity.to_string());
        put("region_in_all_blocks", self.region_in_all_blocks.to_string());
        put("share_region_encoder", self.share_region_encoder.to_string());
        put("steps_per_epoch", self.steps_per_epoch.to_string());
        put("group_size", self.group_size.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            learning_rate: 1.25e-3,
            masking: false,
            precision: Precision::F64,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse_text("# run\n\nepochs = 3 # short\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["nonsense = 1", "epochs", "epochs = -1", "batch_size = 0", "batch_size = 6", "precision = f16"] {
            let err = RunConfig::parse_text(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }
}

//! Flat key=value configuration with validation and a stable hash.

use crate::encoder::OUTPUT_STRIDE;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;

/// Every tunable of the pipeline. Unknown keys are rejected on parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Model geometry.
    pub image_size: usize,
    pub stride: usize,
    pub c_v1: usize,
    pub c_v2: usize,
    pub c_v3: usize,
    pub c_l: usize,
    pub n_max: usize,
    pub d_k: usize,
    pub d_f: usize,
    // Optimization.
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    // Ablation / mode switches.
    pub no_attention: bool,
    pub scaled_attention: bool,
    pub video_mode: bool,
    pub tau: usize,
    // Synthetic data generation.
    pub n_samples: usize,
    pub n_clips: usize,
    pub video_frames: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub relational_bias: f64,
    pub min_speed: f64,
    pub max_speed: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 64,
            stride: OUTPUT_STRIDE,
            c_v1: 32,
            c_v2: 64,
            c_v3: 96,
            c_l: 1000,
            n_max: 20,
            d_k: 512,
            d_f: 500,
            lr: 2.5e-4,
            weight_decay: 5e-4,
            poly_power: 0.9,
            epochs: 6,
            batch_size: 1,
            seed: 0,
            no_attention: false,
            scaled_attention: false,
            video_mode: false,
            tau: 5,
            n_samples: 2400,
            n_clips: 200,
            video_frames: 12,
            split_train: 10.0 / 12.0,
            split_val: 1.0 / 12.0,
            split_test: 1.0 / 12.0,
            min_shapes: 1,
            max_shapes: 3,
            relational_bias: 0.7,
            min_speed: 0.8,
            max_speed: 2.0,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $on:ident) => {
        $on!(image_size, usize);
        $on!(stride, usize);
        $on!(c_v1, usize);
        $on!(c_v2, usize);
        $on!(c_v3, usize);
        $on!(c_l, usize);
        $on!(n_max, usize);
        $on!(d_k, usize);
        $on!(d_f, usize);
        $on!(lr, f64);
        $on!(weight_decay, f64);
        $on!(poly_power, f64);
        $on!(epochs, usize);
        $on!(batch_size, usize);
        $on!(seed, u64);
        $on!(no_attention, bool);
        $on!(scaled_attention, bool);
        $on!(video_mode, bool);
        $on!(tau, usize);
        $on!(n_samples, usize);
        $on!(n_clips, usize);
        $on!(video_frames, usize);
        $on!(split_train, f64);
        $on!(split_val, f64);
        $on!(split_test, f64);
        $on!(min_shapes, usize);
        $on!(max_shapes, usize);
        $on!(relational_bias, f64);
        $on!(min_speed, f64);
        $on!(max_speed, f64);
    };
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected true/false, got '{value}'"
        ))),
    }
}

impl Config {
    /// Set one key from its text value. Unknown keys are an error naming
    /// the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        macro_rules! apply {
            ($field:ident, bool) => {
                if key == stringify!($field) {
                    self.$field = parse_bool(key, value)?;
                    return Ok(());
                }
            };
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value.parse::<$ty>().map_err(|_| {
                        Error::Config(format!(
                            "key '{key}': cannot parse '{value}' as {}",
                            stringify!($ty)
                        ))
                    })?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, apply);
        Err(Error::Config(format!("unknown config key '{key}'")))
    }

    /// Parse `key=value` lines; '#' starts a comment, blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    /// Canonical rendering: every key in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($field:ident, $ty:tt) => {
                out.push_str(&format!("{}={}\n", stringify!($field), self.$field));
            };
        }
        config_keys!(self, emit);
        out
    }

    /// FNV-1a hash of the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stride != OUTPUT_STRIDE {
            return fail(format!(
                "stride must be {OUTPUT_STRIDE} (fixed by the encoder stem)"
            ));
        }
        if self.image_size == 0 || self.image_size % self.stride != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size, self.stride
            ));
        }
        if self.c_v1 == 0 || self.c_v1 > self.c_v2 || self.c_v2 > self.c_v3 {
            return fail(format!(
                "channels must satisfy 1 <= c_v1 <= c_v2 <= c_v3, got ({}, {}, {})",
                self.c_v1, self.c_v2, self.c_v3
            ));
        }
        for (name, v) in [
            ("c_l", self.c_l),
            ("n_max", self.n_max),
            ("d_k", self.d_k),
            ("d_f", self.d_f),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_samples", self.n_samples),
            ("n_clips", self.n_clips),
            ("video_frames", self.video_frames),
            ("min_shapes", self.min_shapes),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.poly_power <= 0.0 {
            return fail("poly_power must be positive".into());
        }
        let split_sum = self.split_train + self.split_val + self.split_test;
        if (split_sum - 1.0).abs() > 1e-6
            || self.split_train < 0.0
            || self.split_val < 0.0
            || self.split_test < 0.0
        {
            return fail(format!("split ratios must be non-negative and sum to 1, got {split_sum}"));
        }
        if self.max_shapes < self.min_shapes || self.max_shapes > 4 {
            return fail(format!(
                "shape count range {}..={} invalid (max 4)",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(0.0..=1.0).contains(&self.relational_bias) {
            return fail("relational_bias must be in [0,1]".into());
        }
        if self.min_speed < 0.0 || self.max_speed < self.min_speed {
            return fail("speed range invalid".into());
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            canvas: self.image_size,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            video_frames: self.video_frames,
            min_speed: self.min_speed,
            max_speed: self.max_speed,
            relational_bias: self.relational_bias,
            ..SynthConfig::default()
        }
    }

    pub fn feature_hw(&self) -> usize {
        self.image_size / self.stride
    }
}

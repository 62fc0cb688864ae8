//! Run configuration: every hyperparameter of the pipeline in one TOML
//! document. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which visual branches feed the joint embedding. Missing branches are
/// filled with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    FaceOnly,
    MotionOnly,
    #[default]
    FaceAndMotion,
}

/// Source of the motion branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionSource {
    /// Windowed encoder features `[T, C, D]`, flattened over the context axis.
    #[default]
    Context,
    /// Optical-flow fields embedded by the flow CNN.
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $text,)*
                })
            }
        }

        impl std::str::FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)*
                    other => Err(format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($text),*].join(", ")
                    )),
                }
            }
        }
    };
}

text_enum!(ConditionMode { FaceOnly => "face_only", MotionOnly => "motion_only", FaceAndMotion => "face_and_motion" });
text_enum!(MotionSource { Context => "context", Flow => "flow" });
text_enum!(Precision { F32 => "f32", F64 => "f64" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // decoder
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub n_captions: usize,
    pub code_rate_hz: f64,

    // conditioning
    pub adapted_layers: usize,
    pub face_rank: usize,
    pub motion_rank: usize,
    pub face_dim: usize,
    pub motion_dim: usize,
    pub max_prefix_len: usize,
    pub condition_mode: ConditionMode,
    pub motion_source: MotionSource,

    // adapter training
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: bool,
    pub grad_clip_norm: f64,
    pub precision: Precision,
    pub seed: u64,

    // base pretraining
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_crop_len: usize,
    pub pretrain_batch_size: usize,

    // generation
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers: 8,
            n_heads: 4,
            ffn_dim: 1024,
            vocab_size: 256,
            prompt_len: 8,
            n_captions: 4,
            code_rate_hz: 50.0,
            adapted_layers: 4,
            face_rank: 12,
            motion_rank: 12,
            face_dim: 768,
            motion_dim: 64,
            max_prefix_len: 500,
            condition_mode: ConditionMode::FaceAndMotion,
            motion_source: MotionSource::Context,
            learning_rate: 1e-2,
            batch_size: 10,
            epochs: 40,
            grad_clip: true,
            grad_clip_norm: 1.0,
            precision: Precision::F32,
            seed: 0,
            pretrain_steps: 500,
            pretrain_learning_rate: 2e-3,
            pretrain_crop_len: 100,
            pretrain_batch_size: 4,
            temperature: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("prompt_len", self.prompt_len),
            ("n_captions", self.n_captions),
            ("face_rank", self.face_rank),
            ("motion_rank", self.motion_rank),
            ("face_dim", self.face_dim),
            ("motion_dim", self.motion_dim),
            ("max_prefix_len", self.max_prefix_len),
            ("batch_size", self.batch_size),
            ("pretrain_crop_len", self.pretrain_crop_len),
            ("pretrain_batch_size", self.pretrain_batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.adapted_layers < 1 || self.adapted_layers > self.n_layers {
            return bad(format!(
                "adapted_layers must satisfy 1 <= L <= n_layers ({}), got {}",
                self.n_layers, self.adapted_layers
            ));
        }
        if self.face_rank > self.face_dim {
            return bad(format!("face_rank {} exceeds face_dim {}", self.face_rank, self.face_dim));
        }
        if self.motion_rank > self.motion_dim {
            return bad(format!(
                "motion_rank {} exceeds motion_dim {}",
                self.motion_rank, self.motion_dim
            ));
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must leave room for the marker and sustain codes (>= 3)".into());
        }
        for (name, v) in [
            ("code_rate_hz", self.code_rate_hz),
            ("learning_rate", self.learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !v.is_finite() || v < 0.0 || (name == "code_rate_hz" && v == 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// First adapted layer, zero-based (`N - L`; one-based it is `N - L + 1`).
    pub fn first_adapted_layer(&self) -> usize {
        self.n_layers - self.adapted_layers
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

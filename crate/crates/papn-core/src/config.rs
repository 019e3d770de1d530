//! Training and model configuration.
//!
//! [`TrainConfig`] carries every knob the model, mixer, and trainer read.
//! Its canonical JSON serialization is hashed into a fingerprint that
//! checkpoints embed, so a checkpoint can refuse to load under a different
//! configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("head count {heads} must divide hidden size {hidden}")]
    HeadsDontDivide { hidden: usize, heads: usize },
    #[error("{field} must be positive")]
    NotPositive { field: &'static str },
    #[error("{field} must be finite and non-negative, got {value}")]
    BadReal { field: &'static str, value: f64 },
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
}

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        concat!("unknown ", stringify!($name), " \"{}\" (expected one of: ",
                                $($text, " ",)+ ")"),
                        other
                    )),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let text = match self {
                    $($name::$variant => $text),+
                };
                f.write_str(text)
            }
        }
    };
}

keyword_enum! {
    /// Node-axis reduction applied to the local embedding.
    Aggregation { Sum => "sum", Mean => "mean", Max => "max", Min => "min" }
}

keyword_enum! {
    /// How the aggregated local embedding meets the global context.
    Mixing { Sum => "sum", RandomSelect => "random_select" }
}

keyword_enum! {
    /// Model ablations: `Opapn` bypasses the transformer encoder entirely.
    Ablation { None => "none", Opapn => "opapn" }
}

keyword_enum! {
    /// Which axis layer normalization reduces over: per-node feature axis or
    /// per-feature node axis.
    NormAxis { Feature => "feature", Batch => "batch" }
}

keyword_enum! {
    /// Denominator of the mean aggregation: node count or hidden size.
    MeanDenominator { Nodes => "nodes", Hidden => "hidden" }
}

/// All model and optimization hyperparameters.
///
/// Fields map one-to-one onto flat `key=value` config-file keys; see
/// [`TrainConfig::apply_kv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub proximity_layers: usize,
    pub topk: usize,
    pub glimpses: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub aggregation: Aggregation,
    pub mixing: Mixing,
    pub mixer_seed: u64,
    pub norm_axis: NormAxis,
    pub mean_denominator: MeanDenominator,
    pub clip_norm: Option<f64>,
    /// Node feature count the model is built for.
    pub nf: usize,
    /// Edge feature count the model is built for.
    pub ef: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            hidden: 128,
            heads: 8,
            encoder_layers: 2,
            proximity_layers: 1,
            topk: 10,
            glimpses: 1,
            epochs: 50,
            seed: 0,
            ablation: Ablation::None,
            aggregation: Aggregation::Sum,
            mixing: Mixing::Sum,
            mixer_seed: 0,
            norm_axis: NormAxis::Feature,
            mean_denominator: MeanDenominator::Nodes,
            clip_norm: None,
            nf: crate::generator::GEN_NF,
            ef: crate::generator::GEN_EF,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("proximity_layers", self.proximity_layers),
            ("topk", self.topk),
            ("nf", self.nf),
            ("ef", self.ef),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ConfigError::NotPositive { field });
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(ConfigError::HeadsDontDivide {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ConfigError::BadReal {
                field: "lr",
                value: self.lr,
            });
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(ConfigError::BadReal {
                    field: "clip_norm",
                    value: c,
                });
            }
        }
        Ok(())
    }

    /// Per-head hidden size.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded. Any field
    /// change changes the fingerprint.
    pub fn fingerprint(&self) -> String {
        let canonical =
            serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies one flat `key=value` pair (the config-file format). Unknown
    /// keys and malformed values are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                message: e.to_string(),
            })
        }
        match key {
            "lr" => self.lr = parsed(key, value)?,
            "batch_size" => self.batch_size = parsed(key, value)?,
            "hidden" => self.hidden = parsed(key, value)?,
            "heads" => self.heads = parsed(key, value)?,
            "encoder_layers" => self.encoder_layers = parsed(key, value)?,
            "proximity_layers" => self.proximity_layers = parsed(key, value)?,
            "topk" => self.topk = parsed(key, value)?,
            "glimpses" => self.glimpses = parsed(key, value)?,
            "epochs" => self.epochs = parsed(key, value)?,
            "seed" => self.seed = parsed(key, value)?,
            "ablation" => self.ablation = parsed(key, value)?,
            "aggregation" => self.aggregation = parsed(key, value)?,
            "mixing" => self.mixing = parsed(key, value)?,
            "mixer_seed" => self.mixer_seed = parsed(key, value)?,
            "norm_axis" => self.norm_axis = parsed(key, value)?,
            "mean_denominator" => self.mean_denominator = parsed(key, value)?,
            "clip_norm" => self.clip_norm = Some(parsed(key, value)?),
            "nf" => self.nf = parsed(key, value)?,
            "ef" => self.ef = parsed(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses a flat config file: one `key=value` per line, `#` comments and
    /// blank lines ignored.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: line.to_string(),
                message: "expected key=value".to_string(),
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

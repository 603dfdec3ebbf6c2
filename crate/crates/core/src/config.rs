//! Configuration file: JSON with `stft`, `ssl`, `vq`, `model` and `train`
//! sections layered over a named preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::ssl::SslConfig;
use crate::vq::VqConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputVariant {
    /// `Z = c`.
    RawSsl,
    /// `Z = c ++ emb(index)`.
    PlusIndexEmbedding,
    /// `Z = c ++ e` (codeword through the straight-through path).
    PlusCodebookVector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Film,
    /// Plain concatenation of `X'` and `h` followed by an affine map.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the feature encoder g.
    pub g_dim: usize,
    /// Width of the mask estimator f.
    pub f_dim: usize,
    pub heads: usize,
    /// Transformer blocks in each of g and f.
    pub layers: usize,
    pub variant: InputVariant,
    /// Embedding width for [`InputVariant::PlusIndexEmbedding`].
    pub emb_dim: usize,
    /// Number of future tokens predicted per frame.
    pub n_predict: usize,
    #[serde(default = "yes")]
    pub causal: bool,
    #[serde(default)]
    pub fusion: Fusion,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_se: f64,
    pub lambda_vq: f64,
    pub lambda_ce: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub seed: u64,
    /// Entries taken from the training manifest for validation when no
    /// separate validation manifest is given.
    #[serde(default = "default_val_count")]
    pub val_count: usize,
}

fn default_val_count() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub stft: StftConfig,
    pub ssl: SslConfig,
    pub vq: VqConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper or desk)"
            ))),
        }
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                stft: StftConfig::default(),
                ssl: SslConfig {
                    layers: 12,
                    dim: 768,
                    heads: 12,
                    ..SslConfig::default()
                },
                vq: VqConfig::default(),
                model: ModelConfig {
                    g_dim: 512,
                    f_dim: 256,
                    heads: 4,
                    layers: 3,
                    variant: InputVariant::PlusCodebookVector,
                    emb_dim: 64,
                    n_predict: 5,
                    causal: true,
                    fusion: Fusion::Film,
                },
                train: TrainConfig {
                    lambda_se: 1.0,
                    lambda_vq: 1.0,
                    lambda_ce: 0.01,
                    lr: 1e-4,
                    epochs: 200,
                    batch: 8,
                    crop_frames: 256,
                    seed: 0,
                    val_count: default_val_count(),
                },
            },
            Preset::Desk => Self {
                stft: StftConfig::default(),
                // Stand-in for a frozen pretrained encoder.
                ssl: SslConfig {
                    freeze_transformer: true,
                    ..SslConfig::default()
                },
                vq: VqConfig {
                    codebook_size: 256,
                    ..VqConfig::default()
                },
                model: ModelConfig {
                    g_dim: 128,
                    f_dim: 64,
                    heads: 4,
                    layers: 3,
                    variant: InputVariant::PlusCodebookVector,
                    emb_dim: 64,
                    n_predict: 5,
                    causal: true,
                    fusion: Fusion::Film,
                },
                train: TrainConfig {
                    lambda_se: 1.0,
                    lambda_vq: 1.0,
                    lambda_ce: 0.01,
                    lr: 1e-3,
                    epochs: 30,
                    batch: 4,
                    crop_frames: 256,
                    seed: 0,
                    val_count: default_val_count(),
                },
            },
        }
    }

    /// Layers `overrides` over `preset` and parses strictly. A top-level
    /// `"preset"` key in `overrides` is honoured when `preset` is `None`.
    pub fn resolve(preset: Option<Preset>, overrides: Option<Value>) -> Result<Self> {
        let mut overrides = overrides.unwrap_or(Value::Object(Default::default()));
        let obj = overrides
            .as_object_mut()
            .ok_or_else(|| Error::Config("config file must contain a JSON object".into()))?;
        let named = match obj.remove("preset") {
            Some(Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(other) => return Err(Error::Config(format!("`preset` must be a string, got {other}"))),
            None => None,
        };
        let base = Self::preset(preset.or(named).unwrap_or(Preset::Desk));
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        deep_merge(&mut merged, overrides);
        let cfg: Config = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, preset: Option<Preset>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file not found: {}", path.display())),
            _ => Error::Config(format!("{}: {e}", path.display())),
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(preset, Some(v))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // An echoed config is complete; parse it without a preset layer.
        let cfg: Config = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.ssl.validate()?;
        self.vq.validate()?;
        let m = &self.model;
        if m.n_predict == 0 {
            return Err(Error::Config("model.n_predict must be >= 1".into()));
        }
        if m.layers == 0 {
            return Err(Error::Config("model.layers must be >= 1".into()));
        }
        for (name, d) in [("model.g_dim", m.g_dim), ("model.f_dim", m.f_dim)] {
            if m.heads == 0 || d % m.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} = {d} not divisible by model.heads = {}",
                    m.heads
                )));
            }
        }
        if m.variant == InputVariant::PlusIndexEmbedding && m.emb_dim == 0 {
            return Err(Error::Config(
                "model.emb_dim must be >= 1 for plus-index-embedding".into(),
            ));
        }
        let t = &self.train;
        for (name, v) in [
            ("lambda_se", t.lambda_se),
            ("lambda_vq", t.lambda_vq),
            ("lambda_ce", t.lambda_ce),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("train.{name} must be >= 0, got {v}")));
            }
        }
        if !(t.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if t.batch == 0 || t.crop_frames <= m.n_predict {
            return Err(Error::Config(format!(
                "train.batch must be >= 1 and train.crop_frames > model.n_predict ({})",
                m.n_predict
            )));
        }
        Ok(())
    }

    /// Compares everything that determines parameter shapes.
    pub fn check_architecture(&self, requested: &Config) -> Result<()> {
        let fields: [(&str, String, String); 15] = [
            (
                "stft.win",
                self.stft.win_length.to_string(),
                requested.stft.win_length.to_string(),
            ),
            (
                "stft.hop",
                self.stft.hop_length.to_string(),
                requested.stft.hop_length.to_string(),
            ),
            (
                "stft.fft",
                self.stft.fft_size.to_string(),
                requested.stft.fft_size.to_string(),
            ),
            (
                "ssl.layers",
                self.ssl.layers.to_string(),
                requested.ssl.layers.to_string(),
            ),
            ("ssl.dim", self.ssl.dim.to_string(), requested.ssl.dim.to_string()),
            ("ssl.heads", self.ssl.heads.to_string(), requested.ssl.heads.to_string()),
            (
                "ssl.conv_kernel",
                self.ssl.conv_kernel.to_string(),
                requested.ssl.conv_kernel.to_string(),
            ),
            (
                "vq.codebook_size",
                self.vq.codebook_size.to_string(),
                requested.vq.codebook_size.to_string(),
            ),
            (
                "vq.code_dim",
                self.vq.code_dim.to_string(),
                requested.vq.code_dim.to_string(),
            ),
            (
                "model.g_dim",
                self.model.g_dim.to_string(),
                requested.model.g_dim.to_string(),
            ),
            (
                "model.f_dim",
                self.model.f_dim.to_string(),
                requested.model.f_dim.to_string(),
            ),
            (
                "model.heads",
                self.model.heads.to_string(),
                requested.model.heads.to_string(),
            ),
            (
                "model.layers",
                self.model.layers.to_string(),
                requested.model.layers.to_string(),
            ),
            (
                "model.variant",
                format!("{:?}", self.model.variant),
                format!("{:?}", requested.model.variant),
            ),
            (
                "model.n_predict",
                self.model.n_predict.to_string(),
                requested.model.n_predict.to_string(),
            ),
        ];
        let extra = [
            (
                "model.emb_dim",
                self.model.emb_dim.to_string(),
                requested.model.emb_dim.to_string(),
            ),
            (
                "model.fusion",
                format!("{:?}", self.model.fusion),
                format!("{:?}", requested.model.fusion),
            ),
        ];
        for (field, found, expected) in fields.into_iter().chain(extra) {
            if found != expected {
                return Err(Error::Structural {
                    field: field.to_string(),
                    found,
                    expected,
                });
            }
        }
        Ok(())
    }
}

fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

//! Training configuration and its `key=value` text form.
//!
//! Recognized keys (one per line, `#` starts a comment):
//!
//! | key | meaning |
//! |-----|---------|
//! | `shape_v`, `shape_t`, `shape_a` | input shape `TxD` per modality |
//! | `latent_t`, `latent_d` | latent length and width |
//! | `heads` | attention heads per path |
//! | `activation` | encoder nonlinearity, `relu` or `identity` |
//! | `shared_interaction` | one interaction matrix for all cores |
//! | `adaptation_sites` | comma list of `latent`, `fused` |
//! | `mmd_kernel`, `rbf_bandwidth` | `linear` or `rbf`; bandwidth unset means median heuristic |
//! | `class_head_enabled`, `num_classes` | auxiliary softmax head |
//! | `ablation` | `full`, `-VT`, `-VA`, `-TA`, `mcihn-1`, `mcihn-2` |
//! | `lr_main`, `beta1`, `beta2`, `epsilon` | Adam settings |
//! | `batch_size`, `dropout`, `max_epochs`, `patience` | schedule |
//! | `adaptation`, `adp_weight` | adaptation-loss switch and weight |
//! | `merge_updates` | fold the encoder losses into the joint update |
//! | `seed`, `shuffle_seed` | initialization and data-order seeds |
//! | `scheme`, `acc2_drop_neutral` | evaluation conventions |
//! | `sweep` | `none`, `dropout` or `adp_weight` |
//!
//! Only the main learning rate exists; there is no pretrained text encoder
//! and hence no separate fine-tuning rate.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aae::Activation;
use crate::cgmm::{AdaptationSite, MmdKernel};
use crate::data::{LabelScheme, ModalShape, Modality};
use crate::model::{Ablation, ModelConfig};
use crate::optim::AdamConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Hyperparameter grid shared by the dropout and adaptation-weight sweeps.
pub const SWEEP_GRID: [f64; 8] = [0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    None,
    Dropout,
    AdpWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub adaptation: bool,
    pub adp_weight: f64,
    pub merge_updates: bool,
    pub seed: u64,
    pub shuffle_seed: u64,
    pub scheme: LabelScheme,
    pub acc2_drop_neutral: bool,
    pub sweep: Sweep,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            ablation: Ablation::Full,
            adam: AdamConfig::default(),
            batch_size: 32,
            dropout: 0.5,
            max_epochs: 100,
            patience: 10,
            adaptation: true,
            adp_weight: 1.0,
            merge_updates: false,
            seed: 0,
            shuffle_seed: 0,
            scheme: LabelScheme::Mosi7,
            acc2_drop_neutral: false,
            sweep: Sweep::None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected a boolean".into(),
        }),
    }
}

fn parse_shape(key: &str, value: &str) -> Result<ModalShape, ConfigError> {
    let bad = || ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: "expected TxD".into(),
    };
    let (t, d) = value.split_once('x').ok_or_else(bad)?;
    Ok(ModalShape::new(
        t.trim().parse().map_err(|_| bad())?,
        d.trim().parse().map_err(|_| bad())?,
    ))
}

impl TrainConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "shape_v" => m.shapes[Modality::Visual.index()] = parse_shape(key, value)?,
            "shape_t" => m.shapes[Modality::Text.index()] = parse_shape(key, value)?,
            "shape_a" => m.shapes[Modality::Audio.index()] = parse_shape(key, value)?,
            "latent_t" => m.latent.t = parse(key, value)?,
            "latent_d" => m.latent.d = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "activation" => {
                m.activation = match value {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected relu or identity".into(),
                        })
                    }
                }
            }
            "shared_interaction" => m.shared_interaction = parse_bool(key, value)?,
            "adaptation_sites" => {
                m.adaptation_sites = value
                    .split(',')
                    .map(|s| parse::<AdaptationSite>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "mmd_kernel" => {
                let bandwidth = match m.kernel {
                    MmdKernel::Rbf { bandwidth } => bandwidth,
                    MmdKernel::Linear => None,
                };
                m.kernel = match value {
                    "linear" => MmdKernel::Linear,
                    "rbf" => MmdKernel::Rbf { bandwidth },
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected linear or rbf".into(),
                        })
                    }
                }
            }
            "rbf_bandwidth" => {
                let bandwidth = if value.is_empty() || value == "median" {
                    None
                } else {
                    Some(parse::<f64>(key, value)?)
                };
                m.kernel = MmdKernel::Rbf { bandwidth };
            }
            "class_head_enabled" => {
                m.class_head = if parse_bool(key, value)? {
                    Some(m.class_head.unwrap_or(7))
                } else {
                    None
                }
            }
            "num_classes" => m.class_head = Some(parse(key, value)?),
            "ablation" => self.ablation = parse(key, value)?,
            "lr_main" | "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "epsilon" => self.adam.epsilon = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "adaptation" => self.adaptation = parse_bool(key, value)?,
            "adp_weight" => self.adp_weight = parse(key, value)?,
            "merge_updates" => self.merge_updates = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse(key, value)?,
            "scheme" => self.scheme = parse(key, value)?,
            "acc2_drop_neutral" => self.acc2_drop_neutral = parse_bool(key, value)?,
            "sweep" => {
                self.sweep = match value {
                    "none" => Sweep::None,
                    "dropout" => Sweep::Dropout,
                    "adp_weight" => Sweep::AdpWeight,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected none, dropout or adp_weight".into(),
                        })
                    }
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every setting of a `key=value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |s: &str| Err(ConfigError::Invalid(s.to_string()));
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return invalid("lr_main must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return invalid("betas must lie in [0, 1)");
        }
        if self.adam.epsilon.is_nan() || self.adam.epsilon <= 0.0 {
            return invalid("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return invalid("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return invalid("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        if !(self.adp_weight >= 0.0 && self.adp_weight.is_finite()) {
            return invalid("adp_weight must be finite and nonnegative");
        }
        if let MmdKernel::Rbf { bandwidth: Some(b) } = self.model.kernel {
            if !(b > 0.0 && b.is_finite()) {
                return invalid("rbf_bandwidth must be positive");
            }
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// The configuration as a `key=value` document accepted by
    /// [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let shape = |x: ModalShape| format!("{}x{}", x.t, x.d);
        let _ = writeln!(s, "shape_v={}", shape(m.shapes[0]));
        let _ = writeln!(s, "shape_t={}", shape(m.shapes[1]));
        let _ = writeln!(s, "shape_a={}", shape(m.shapes[2]));
        let _ = writeln!(s, "latent_t={}", m.latent.t);
        let _ = writeln!(s, "latent_d={}", m.latent.d);
        let _ = writeln!(s, "heads={}", m.heads);
        let act = match m.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        let _ = writeln!(s, "activation={act}");
        let _ = writeln!(s, "shared_interaction={}", m.shared_interaction);
        let sites: Vec<String> = m.adaptation_sites.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "adaptation_sites={}", sites.join(","));
        match m.kernel {
            MmdKernel::Linear => {
                let _ = writeln!(s, "mmd_kernel=linear");
            }
            MmdKernel::Rbf { bandwidth } => {
                let _ = writeln!(s, "mmd_kernel=rbf");
                if let Some(b) = bandwidth {
                    let _ = writeln!(s, "rbf_bandwidth={b}");
                }
            }
        }
        let _ = writeln!(s, "class_head_enabled={}", m.class_head.is_some());
        if let Some(c) = m.class_head {
            let _ = writeln!(s, "num_classes={c}");
        }
        let _ = writeln!(s, "ablation={}", self.ablation);
        let _ = writeln!(s, "lr_main={}", self.adam.lr);
        let _ = writeln!(s, "beta1={}", self.adam.beta1);
        let _ = writeln!(s, "beta2={}", self.adam.beta2);
        let _ = writeln!(s, "epsilon={}", self.adam.epsilon);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "adaptation={}", self.adaptation);
        let _ = writeln!(s, "adp_weight={}", self.adp_weight);
        let _ = writeln!(s, "merge_updates={}", self.merge_updates);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "shuffle_seed={}", self.shuffle_seed);
        let _ = writeln!(s, "scheme={}", self.scheme);
        let _ = writeln!(s, "acc2_drop_neutral={}", self.acc2_drop_neutral);
        let sweep = match self.sweep {
            Sweep::None => "none",
            Sweep::Dropout => "dropout",
            Sweep::AdpWeight => "adp_weight",
        };
        let _ = writeln!(s, "sweep={sweep}");
        s
    }
}

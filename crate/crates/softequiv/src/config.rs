//! Experiment configuration: a strict `key = value` file format (UTF-8, `#`
//! comments, dotted keys) where unknown keys are errors, plus the canonical
//! echo used by run manifests and resume validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::augment::{CropPolicy, PhotoPolicy};
use crate::group::{GeoPolicy, Ratio};
use crate::loss::InvKind;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    UnknownKey { line: usize, key: String },
    MissingValue { line: usize, key: String },
    BadValue { line: usize, key: String, detail: String },
    Range { key: String, detail: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(s) => write!(f, "{s}"),
            ConfigError::UnknownKey { line, key } => {
                write!(f, "line {line}: unknown key `{key}`")
            }
            ConfigError::MissingValue { line, key } => {
                write!(f, "line {line}: key `{key}` has no value")
            }
            ConfigError::BadValue { line, key, detail } => {
                write!(f, "line {line}: bad value for `{key}`: {detail}")
            }
            ConfigError::Range { key, detail } => write!(f, "`{key}`: {detail}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Every knob of a pretraining run, fully serializable; a run's manifest
/// echoes it verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // train.*
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub ckpt_every: usize,
    /// Pure-baseline mode: no partition, every image uses the crop policy.
    pub baseline: bool,
    // data.*
    pub data_path: String,
    // model.*
    pub model: ModelConfig,
    // loss.*
    pub inv_kind: InvKind,
    pub tau_inv: f64,
    pub tau_eq: f64,
    pub lambda: f64,
    pub off_diag_weight: f64,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub all_layers: bool,
    pub augself_weight: f64,
    pub augself_layer: usize,
    // aug.*
    pub crop: CropPolicy,
    pub photo: PhotoPolicy,
    // geo.*
    pub geo: GeoPolicy,
    // part.*
    pub r: f64,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        Config {
            epochs: 30,
            batch_size: 64,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 3,
            seed: 1,
            precision: Precision::F32,
            ckpt_every: 10,
            baseline: false,
            data_path: "data/train.serd".to_string(),
            crop: CropPolicy {
                out_size: model.image,
                ..CropPolicy::default()
            },
            model,
            inv_kind: InvKind::Contrastive,
            tau_inv: 0.2,
            tau_eq: 0.3,
            lambda: 0.5,
            off_diag_weight: 0.01,
            proj_dim: 32,
            proj_hidden: 64,
            all_layers: false,
            augself_weight: 0.0,
            augself_layer: 4,
            photo: PhotoPolicy::default(),
            geo: GeoPolicy::default(),
            // reference-scale sweeps favor r around 0.01; at desk batch
            // sizes that starves the equivariant sub-batch (64 * 0.01 < 1),
            // so the default scales up to keep |b2| comfortably contrastive
            r: 0.25,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "on" => Some(true),
        "false" | "0" | "off" => Some(false),
        _ => None,
    }
}

impl Config {
    /// Apply one `key = value` assignment.
    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |detail: String| ConfigError::BadValue {
            line,
            key: key.to_string(),
            detail,
        };
        macro_rules! num {
            ($t:ty) => {
                value
                    .parse::<$t>()
                    .map_err(|e| bad(format!("{e}")))?
            };
        }
        match key {
            "train.epochs" => self.epochs = num!(usize),
            "train.batch_size" => self.batch_size = num!(usize),
            "train.base_lr" => self.base_lr = num!(f64),
            "train.weight_decay" => self.weight_decay = num!(f64),
            "train.warmup_epochs" => self.warmup_epochs = num!(usize),
            "train.seed" => self.seed = num!(u64),
            "train.ckpt_every" => self.ckpt_every = num!(usize),
            "train.baseline" => {
                self.baseline = parse_bool(value).ok_or_else(|| bad("expected true/false".into()))?
            }
            "train.precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad("expected f32 or f64".into())),
                }
            }
            "data.path" => self.data_path = value.to_string(),
            "model.image" => self.model.image = num!(usize),
            "model.patch" => self.model.patch = num!(usize),
            "model.channels" => self.model.channels = num!(usize),
            "model.dim" => self.model.dim = num!(usize),
            "model.depth" => self.model.depth = num!(usize),
            "model.heads" => self.model.heads = num!(usize),
            "model.mlp_ratio" => self.model.mlp_ratio = num!(usize),
            "model.split_layer" => self.model.split_layer = num!(usize),
            "model.cls_layer" => self.model.cls_layer = num!(usize),
            "loss.kind" => {
                self.inv_kind = InvKind::parse(value)
                    .ok_or_else(|| bad("expected contrastive or redundancy".into()))?
            }
            "loss.tau_inv" => self.tau_inv = num!(f64),
            "loss.tau_eq" => self.tau_eq = num!(f64),
            "loss.lambda" => self.lambda = num!(f64),
            "loss.off_diag_weight" => self.off_diag_weight = num!(f64),
            "loss.proj_dim" => self.proj_dim = num!(usize),
            "loss.proj_hidden" => self.proj_hidden = num!(usize),
            "loss.all_layers" => {
                self.all_layers = parse_bool(value).ok_or_else(|| bad("expected true/false".into()))?
            }
            "loss.augself_weight" => self.augself_weight = num!(f64),
            "loss.augself_layer" => self.augself_layer = num!(usize),
            "aug.crop_scale_min" => self.crop.scale_min = num!(f64),
            "aug.crop_scale_max" => self.crop.scale_max = num!(f64),
            "aug.crop_aspect_min" => self.crop.aspect_min = num!(f64),
            "aug.crop_aspect_max" => self.crop.aspect_max = num!(f64),
            "aug.jitter" => self.photo.jitter = num!(f64),
            "aug.p_gray" => self.photo.p_gray = num!(f64),
            "aug.noise_sigma" => self.photo.noise_sigma = num!(f64),
            "geo.rot90" => {
                self.geo.rot90 = parse_bool(value).ok_or_else(|| bad("expected true/false".into()))?
            }
            "geo.hflip" => {
                self.geo.hflip = parse_bool(value).ok_or_else(|| bad("expected true/false".into()))?
            }
            "geo.scales" => {
                let mut scales = Vec::new();
                for part in value.split(',') {
                    scales.push(
                        Ratio::parse(part)
                            .ok_or_else(|| bad(format!("bad rational `{part}`")))?,
                    );
                }
                self.geo.scales = scales;
            }
            "part.r" => self.r = num!(f64),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Cross-field validation after parsing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(ConfigError::Range {
                key: "part.r".into(),
                detail: format!("{} outside [0,1]", self.r),
            });
        }
        if self.tau_eq <= 0.0 || self.tau_inv <= 0.0 {
            return Err(ConfigError::Range {
                key: "loss.tau_eq".into(),
                detail: "temperatures must be positive".into(),
            });
        }
        if self.lambda < 0.0 {
            return Err(ConfigError::Range {
                key: "loss.lambda".into(),
                detail: "lambda must be non-negative".into(),
            });
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ConfigError::Range {
                key: "train.batch_size".into(),
                detail: "epochs and batch_size must be positive".into(),
            });
        }
        self.model.validate().map_err(|e| ConfigError::Range {
            key: "model".into(),
            detail: e.to_string(),
        })?;
        Ok(())
    }

    pub fn parse_str(content: &str, base: Config) -> Result<Config, ConfigError> {
        let mut cfg = base;
        for (i, raw) in content.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(ConfigError::MissingValue {
                line,
                key: stripped.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(ConfigError::MissingValue {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Config, ConfigError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_str(&content, Config::default())
    }

    /// Canonical serialization: every key in a fixed order. Parsing the echo
    /// reproduces the config exactly.
    pub fn echo(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("train.epochs", self.epochs.to_string());
        map.insert("train.batch_size", self.batch_size.to_string());
        map.insert("train.base_lr", format!("{:e}", self.base_lr));
        map.insert("train.weight_decay", format!("{:e}", self.weight_decay));
        map.insert("train.warmup_epochs", self.warmup_epochs.to_string());
        map.insert("train.seed", self.seed.to_string());
        map.insert("train.precision", self.precision.name().to_string());
        map.insert("train.ckpt_every", self.ckpt_every.to_string());
        map.insert("train.baseline", self.baseline.to_string());
        map.insert("data.path", self.data_path.clone());
        map.insert("model.image", self.model.image.to_string());
        map.insert("model.patch", self.model.patch.to_string());
        map.insert("model.channels", self.model.channels.to_string());
        map.insert("model.dim", self.model.dim.to_string());
        map.insert("model.depth", self.model.depth.to_string());
        map.insert("model.heads", self.model.heads.to_string());
        map.insert("model.mlp_ratio", self.model.mlp_ratio.to_string());
        map.insert("model.split_layer", self.model.split_layer.to_string());
        map.insert("model.cls_layer", self.model.cls_layer.to_string());
        map.insert("loss.kind", self.inv_kind.name().to_string());
        map.insert("loss.tau_inv", format!("{:e}", self.tau_inv));
        map.insert("loss.tau_eq", format!("{:e}", self.tau_eq));
        map.insert("loss.lambda", format!("{:e}", self.lambda));
        map.insert("loss.off_diag_weight", format!("{:e}", self.off_diag_weight));
        map.insert("loss.proj_dim", self.proj_dim.to_string());
        map.insert("loss.proj_hidden", self.proj_hidden.to_string());
        map.insert("loss.all_layers", self.all_layers.to_string());
        map.insert("loss.augself_weight", format!("{:e}", self.augself_weight));
        map.insert("loss.augself_layer", self.augself_layer.to_string());
        map.insert("aug.crop_scale_min", format!("{:e}", self.crop.scale_min));
        map.insert("aug.crop_scale_max", format!("{:e}", self.crop.scale_max));
        map.insert("aug.crop_aspect_min", format!("{:e}", self.crop.aspect_min));
        map.insert("aug.crop_aspect_max", format!("{:e}", self.crop.aspect_max));
        map.insert("aug.jitter", format!("{:e}", self.photo.jitter));
        map.insert("aug.p_gray", format!("{:e}", self.photo.p_gray));
        map.insert("aug.noise_sigma", format!("{:e}", self.photo.noise_sigma));
        map.insert("geo.rot90", self.geo.rot90.to_string());
        map.insert("geo.hflip", self.geo.hflip.to_string());
        map.insert(
            "geo.scales",
            self.geo
                .scales
                .iter()
                .map(|s| format!("{}/{}", s.num(), s.den()))
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("part.r", format!("{:e}", self.r));
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// The crop policy with the output size pinned to the model's image side.
    pub fn effective_crop(&self) -> CropPolicy {
        CropPolicy {
            out_size: self.model.image,
            ..self.crop.clone()
        }
    }
}

/// Write the documented defaults as a parseable config file.
pub fn write_defaults(path: &Path) -> Result<(), ConfigError> {
    let body = format!(
        "# softequiv defaults (every recognized key, regenerate with --write-defaults)\n{}",
        Config::default().echo()
    );
    std::fs::write(path, body).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))
}

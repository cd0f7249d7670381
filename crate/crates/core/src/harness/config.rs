//! Run configuration as flat dotted keys.
//!
//! Files are TOML. Tables are flattened, so `[train]\nepochs = 5` and
//! `"train.epochs" = 5` both set the key `train.epochs`. Every key must
//! appear in [`SCHEMA`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::PoseRange;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pam::PamSettings;
use crate::posenet::{ClassifierConfig, NetConfig};
use crate::tensor::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    StrList,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Int => "integer",
            Kind::Float => "number",
            Kind::Bool => "boolean",
            Kind::Str => "string",
            Kind::StrList => "list of strings",
        })
    }
}

/// `(key, type, description)` for every accepted key.
pub const SCHEMA: &[(&str, Kind, &str)] = &[
    ("seed", Kind::Int, "base seed for initialisation and every data stream"),
    ("train.epochs", Kind::Int, "passes over the training scene stream (≥ 1)"),
    ("train.scenes_per_epoch", Kind::Int, "scenes per epoch (≥ 1)"),
    ("train.lr", Kind::Float, "Adam step size"),
    ("train.lr_final", Kind::Float, "step size reached by the last epoch (linear decay)"),
    ("train.points", Kind::Int, "observed points fed to the network per scene"),
    ("train.loss_points", Kind::Int, "model points used inside the loss"),
    ("loss.w", Kind::Float, "confidence regulariser weight (> 0)"),
    ("net.width1", Kind::Int, "first pointwise layer width of both branches"),
    ("net.width2", Kind::Int, "second pointwise layer width of both branches"),
    ("net.head_width", Kind::Int, "hidden width of every head"),
    ("net.xyz_scale", Kind::Float, "coordinate scaling before the geometry branch"),
    ("net.offset_scale", Kind::Float, "scaling of raw translation outputs"),
    ("net.fuse", Kind::Bool, "pointwise layer over concatenated branch features before pooling"),
    ("pam.reduction_ratio", Kind::Int, "bottleneck ratio r (must divide the channel count)"),
    ("pam.gap_convs", Kind::Int, "pointwise convolutions in the geometric path (≥ 2)"),
    ("pam.insertion_points", Kind::StrList, "layers followed by an attention module"),
    ("pam.enable_cap", Kind::Bool, "channel path on/off"),
    ("pam.enable_gap", Kind::Bool, "geometric path on/off"),
    ("refine.iters", Kind::Int, "refinement iterations K at evaluation"),
    ("refine.epochs", Kind::Int, "refiner training epochs (0 leaves it untrained)"),
    ("refine.lr", Kind::Float, "refiner Adam step size"),
    ("data.objects", Kind::Int, "number of synthetic objects (1 to 3)"),
    ("data.model_points", Kind::Int, "surface samples per object model"),
    ("data.occlusion_max", Kind::Float, "per-scene occlusion drawn uniformly from [0, this]"),
    ("data.noise_sigma", Kind::Float, "Gaussian noise per coordinate, metres"),
    ("data.max_angle_deg", Kind::Float, "largest rotation angle from identity, degrees"),
    ("data.eval_scenes", Kind::Int, "held-out evaluation scenes"),
    ("classify.train_per_class", Kind::Int, "training shapes per class"),
    ("classify.test_per_class", Kind::Int, "held-out shapes per class"),
    ("classify.points", Kind::Int, "points per shape"),
    ("classify.epochs", Kind::Int, "classifier training epochs"),
    ("classify.lr", Kind::Float, "classifier Adam step size"),
    ("classify.lr_final", Kind::Float, "classifier step size reached by the last epoch"),
    ("output.dir", Kind::Str, "directory for reports and checkpoints"),
];

pub fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, ..)| *k == key).map(|(_, kind, _)| *kind)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<String>),
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Int(v) => write!(f, "{v}"),
            ConfigValue::Float(v) => write!(f, "{v:?}"),
            ConfigValue::Bool(v) => write!(f, "{v}"),
            ConfigValue::Str(v) => write!(f, "{v:?}"),
            ConfigValue::List(v) => write!(f, "{v:?}"),
        }
    }
}

impl ConfigValue {
    fn from_toml(key: &str, v: &toml::Value) -> Result<Self> {
        Ok(match v {
            toml::Value::Integer(i) => ConfigValue::Int(*i),
            toml::Value::Float(x) => ConfigValue::Float(*x),
            toml::Value::Boolean(b) => ConfigValue::Bool(*b),
            toml::Value::String(s) => ConfigValue::Str(s.clone()),
            toml::Value::Array(items) => ConfigValue::List(
                items
                    .iter()
                    .map(|i| {
                        i.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| Error::Config(format!("`{key}`: list items must be strings")))
                    })
                    .collect::<Result<_>>()?,
            ),
            other => return Err(Error::Config(format!("`{key}`: unsupported value {other}"))),
        })
    }

    /// Command-line text for a key of the given kind.
    pub fn parse(kind: Kind, text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("expected a {kind}, got `{text}`"));
        Ok(match kind {
            Kind::Int => ConfigValue::Int(text.trim().parse().map_err(|_| bad())?),
            Kind::Float => ConfigValue::Float(text.trim().parse().map_err(|_| bad())?),
            Kind::Bool => ConfigValue::Bool(text.trim().parse().map_err(|_| bad())?),
            Kind::Str => ConfigValue::Str(text.to_string()),
            Kind::StrList => ConfigValue::List(
                text.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect(),
            ),
        })
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, ConfigValue>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => {
                let value = ConfigValue::from_toml(&key, other)?;
                if out.insert(key.clone(), value).is_some() {
                    return Err(Error::Config(format!("`{key}` is set twice")));
                }
            }
        }
    }
    Ok(())
}

/// Parses a TOML document into flat key-value pairs.
pub fn flatten_toml(text: &str) -> Result<BTreeMap<String, ConfigValue>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub objects: usize,
    pub model_points: usize,
    pub occlusion_max: f64,
    pub noise_sigma: f64,
    pub max_angle_deg: f64,
    pub eval_scenes: usize,
}

impl DataConfig {
    pub fn pose_range(&self) -> PoseRange {
        PoseRange {
            max_angle: self.max_angle_deg.to_radians(),
            ..PoseRange::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifySettings {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub points: usize,
    pub loss_points: usize,
    pub loss: LossConfig,
    pub net: NetConfig,
    pub refine_iters: usize,
    pub refine_epochs: usize,
    pub refine_lr: f64,
    pub data: DataConfig,
    pub classify: ClassifySettings,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 30,
            scenes_per_epoch: 200,
            lr: 2e-3,
            lr_final: 1e-4,
            points: 64,
            loss_points: 100,
            loss: LossConfig::default(),
            net: NetConfig {
                num_objects: 3,
                ..NetConfig::default()
            },
            refine_iters: 2,
            refine_epochs: 10,
            refine_lr: 3e-4,
            data: DataConfig {
                objects: 3,
                model_points: 500,
                occlusion_max: 0.3,
                noise_sigma: 0.001,
                max_angle_deg: 90.0,
                eval_scenes: 100,
            },
            classify: ClassifySettings {
                train_per_class: 300,
                test_per_class: 100,
                points: 128,
                epochs: 30,
                lr: 1e-3,
                lr_final: 1e-4,
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

fn expect_int(key: &str, v: &ConfigValue) -> Result<usize> {
    match v {
        ConfigValue::Int(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("`{key}` must be a non-negative integer, got {v}"))),
    }
}

fn expect_float(key: &str, v: &ConfigValue) -> Result<f64> {
    match v {
        ConfigValue::Float(x) => Ok(*x),
        ConfigValue::Int(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("`{key}` must be a number, got {v}"))),
    }
}

fn expect_bool(key: &str, v: &ConfigValue) -> Result<bool> {
    match v {
        ConfigValue::Bool(b) => Ok(*b),
        _ => Err(Error::Config(format!("`{key}` must be a boolean, got {v}"))),
    }
}

impl RunConfig {
    /// Defaults overridden by a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in flatten_toml(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key=value` with the value parsed according to the schema.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (key, text) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let key = key.trim();
        let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.set(key, &ConfigValue::parse(kind, text)?)
    }

    pub fn set(&mut self, key: &str, v: &ConfigValue) -> Result<()> {
        let pam = &mut self.net.pam;
        match key {
            "seed" => self.seed = expect_int(key, v)? as u64,
            "train.epochs" => self.epochs = expect_int(key, v)?,
            "train.scenes_per_epoch" => self.scenes_per_epoch = expect_int(key, v)?,
            "train.lr" => self.lr = expect_float(key, v)?,
            "train.lr_final" => self.lr_final = expect_float(key, v)?,
            "train.points" => self.points = expect_int(key, v)?,
            "train.loss_points" => self.loss_points = expect_int(key, v)?,
            "loss.w" => self.loss.w = expect_float(key, v)?,
            "net.width1" => {
                let w = expect_int(key, v)?;
                self.net.geo_widths[0] = w;
                self.net.app_widths[0] = w;
            }
            "net.width2" => {
                let w = expect_int(key, v)?;
                self.net.geo_widths[1] = w;
                self.net.app_widths[1] = w;
            }
            "net.head_width" => self.net.head_width = expect_int(key, v)?,
            "net.xyz_scale" => self.net.xyz_scale = expect_float(key, v)?,
            "net.offset_scale" => self.net.offset_scale = expect_float(key, v)?,
            "net.fuse" => self.net.fuse = expect_bool(key, v)?,
            "pam.reduction_ratio" => pam.reduction_ratio = expect_int(key, v)?,
            "pam.gap_convs" => pam.gap_convs = expect_int(key, v)?,
            "pam.insertion_points" => match v {
                ConfigValue::List(l) => pam.insertion_points = l.clone(),
                ConfigValue::Str(s) => pam.insertion_points = vec![s.clone()],
                _ => return Err(Error::Config(format!("`{key}` must be a list of strings, got {v}"))),
            },
            "pam.enable_cap" => pam.enable_cap = expect_bool(key, v)?,
            "pam.enable_gap" => pam.enable_gap = expect_bool(key, v)?,
            "refine.iters" => self.refine_iters = expect_int(key, v)?,
            "refine.epochs" => self.refine_epochs = expect_int(key, v)?,
            "refine.lr" => self.refine_lr = expect_float(key, v)?,
            "data.objects" => {
                self.data.objects = expect_int(key, v)?;
                self.net.num_objects = self.data.objects;
            }
            "data.model_points" => self.data.model_points = expect_int(key, v)?,
            "data.occlusion_max" => self.data.occlusion_max = expect_float(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = expect_float(key, v)?,
            "data.max_angle_deg" => self.data.max_angle_deg = expect_float(key, v)?,
            "data.eval_scenes" => self.data.eval_scenes = expect_int(key, v)?,
            "classify.train_per_class" => self.classify.train_per_class = expect_int(key, v)?,
            "classify.test_per_class" => self.classify.test_per_class = expect_int(key, v)?,
            "classify.points" => self.classify.points = expect_int(key, v)?,
            "classify.epochs" => self.classify.epochs = expect_int(key, v)?,
            "classify.lr" => self.classify.lr = expect_float(key, v)?,
            "classify.lr_final" => self.classify.lr_final = expect_float(key, v)?,
            "output.dir" => match v {
                ConfigValue::Str(s) => self.output_dir = PathBuf::from(s),
                _ => return Err(Error::Config(format!("`{key}` must be a string, got {v}"))),
            },
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.scenes_per_epoch == 0 {
            return fail("train.epochs and train.scenes_per_epoch must be at least 1");
        }
        let rates = [self.lr, self.lr_final, self.refine_lr, self.classify.lr, self.classify.lr_final];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return fail("learning rates must be finite and non-negative");
        }
        if self.points == 0 || self.loss_points == 0 {
            return fail("train.points and train.loss_points must be at least 1");
        }
        self.loss.validate()?;
        self.net.validate()?;
        if !(1..=3).contains(&self.data.objects) || self.net.num_objects != self.data.objects {
            return fail("data.objects must be 1, 2 or 3");
        }
        if self.data.model_points < 8 {
            return fail("data.model_points must be at least 8");
        }
        if !(0.0..=0.9).contains(&self.data.occlusion_max) {
            return fail("data.occlusion_max must lie in [0, 0.9]");
        }
        if !(self.data.noise_sigma >= 0.0 && self.data.noise_sigma.is_finite()) {
            return fail("data.noise_sigma must be finite and non-negative");
        }
        if !(self.data.max_angle_deg > 0.0 && self.data.max_angle_deg <= 180.0) {
            return fail("data.max_angle_deg must lie in (0, 180]");
        }
        if self.data.eval_scenes == 0 {
            return fail("data.eval_scenes must be at least 1");
        }
        let c = &self.classify;
        if c.train_per_class == 0 || c.test_per_class == 0 || c.points == 0 || c.epochs == 0 {
            return fail("classify sizes and epochs must be at least 1");
        }
        Ok(())
    }

    /// Current value of every schema key.
    pub fn to_pairs(&self) -> Vec<(&'static str, ConfigValue)> {
        use ConfigValue::*;
        let pam = &self.net.pam;
        vec![
            ("seed", Int(self.seed as i64)),
            ("train.epochs", Int(self.epochs as i64)),
            ("train.scenes_per_epoch", Int(self.scenes_per_epoch as i64)),
            ("train.lr", Float(self.lr)),
            ("train.lr_final", Float(self.lr_final)),
            ("train.points", Int(self.points as i64)),
            ("train.loss_points", Int(self.loss_points as i64)),
            ("loss.w", Float(self.loss.w)),
            ("net.width1", Int(self.net.geo_widths[0] as i64)),
            ("net.width2", Int(self.net.geo_widths[1] as i64)),
            ("net.head_width", Int(self.net.head_width as i64)),
            ("net.xyz_scale", Float(self.net.xyz_scale)),
            ("net.offset_scale", Float(self.net.offset_scale)),
            ("net.fuse", Bool(self.net.fuse)),
            ("pam.reduction_ratio", Int(pam.reduction_ratio as i64)),
            ("pam.gap_convs", Int(pam.gap_convs as i64)),
            ("pam.insertion_points", List(pam.insertion_points.clone())),
            ("pam.enable_cap", Bool(pam.enable_cap)),
            ("pam.enable_gap", Bool(pam.enable_gap)),
            ("refine.iters", Int(self.refine_iters as i64)),
            ("refine.epochs", Int(self.refine_epochs as i64)),
            ("refine.lr", Float(self.refine_lr)),
            ("data.objects", Int(self.data.objects as i64)),
            ("data.model_points", Int(self.data.model_points as i64)),
            ("data.occlusion_max", Float(self.data.occlusion_max)),
            ("data.noise_sigma", Float(self.data.noise_sigma)),
            ("data.max_angle_deg", Float(self.data.max_angle_deg)),
            ("data.eval_scenes", Int(self.data.eval_scenes as i64)),
            ("classify.train_per_class", Int(self.classify.train_per_class as i64)),
            ("classify.test_per_class", Int(self.classify.test_per_class as i64)),
            ("classify.points", Int(self.classify.points as i64)),
            ("classify.epochs", Int(self.classify.epochs as i64)),
            ("classify.lr", Float(self.classify.lr)),
            ("classify.lr_final", Float(self.classify.lr_final)),
            ("output.dir", Str(self.output_dir.display().to_string())),
        ]
    }

    /// Flat TOML that reproduces this configuration.
    pub fn to_toml(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("\"{k}\" = {v}\n")).collect()
    }

    /// FNV-1a over every key except `output.dir`.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_pairs()
            .iter()
            .filter(|(k, _)| *k != "output.dir")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    pub fn classifier(&self, with_pam: bool) -> ClassifierConfig {
        let mut pam = PamSettings {
            insertion_points: vec!["mid".into()],
            ..self.net.pam.clone()
        };
        if !with_pam {
            pam.enable_cap = false;
            pam.enable_gap = false;
        }
        ClassifierConfig {
            pam,
            ..ClassifierConfig::default()
        }
    }
}

//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::bs::DropMapping;
use crate::data::{
    load_folder, make_synthetic_dataset, resize_for_input, AugmentConfig, Split, SyntheticSpec, IMAGENET_MEAN,
    IMAGENET_STD,
};
use crate::error::{HerbsError, Result};
use crate::net::{HerbsConfig, HerbsNet, Readout};
use crate::nn::Activation;
use crate::refinement::{TemperatureMode, TemperatureSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Natural-image channel statistics.
    Imagenet,
    /// `(x - 0.5) / 0.5` on every channel.
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub input_size: usize,
    /// `None` follows the 384 -> 510 / 448 -> 600 rule.
    pub resize_size: Option<usize>,
    pub normalization: Normalization,
    pub flip_prob: f64,
    pub blur_prob: f64,
    /// Rescales the averaged gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 8,
            accum_steps: 4,
            epochs: 80,
            seed: 0,
            input_size: 384,
            resize_size: None,
            normalization: Normalization::Imagenet,
            flip_prob: 0.5,
            blur_prob: 0.5,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn resize(&self) -> usize {
        self.resize_size.unwrap_or_else(|| resize_for_input(self.input_size))
    }

    pub fn augment(&self) -> AugmentConfig {
        let (mean, std) = match self.normalization {
            Normalization::Imagenet => (IMAGENET_MEAN, IMAGENET_STD),
            Normalization::Half => ([0.5; 3], [0.5; 3]),
        };
        AugmentConfig {
            resize_size: self.resize(),
            mean,
            std,
            flip_prob: self.flip_prob,
            blur_prob: self.blur_prob,
            ..AugmentConfig::new(self.input_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(HerbsError::InvalidConfig("batch_size and accum_steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(HerbsError::InvalidConfig("lr, weight_decay >= 0 and momentum in [0, 1) required".into()));
        }
        self.augment().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Class-per-directory trees; without a test tree the training tree is reused.
    Folder {
        train: PathBuf,
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Generic classes need more fine classes than this to be reported.
    pub generic_threshold: usize,
    /// Number of test images rendered by `visualize`.
    pub heatmaps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { generic_threshold: 6, heatmaps: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: HerbsConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// CPU-sized run on generated data.
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        let mut model = HerbsConfig::tiny(synthetic.num_classes());
        model.neck_dim = 32;
        let train = TrainConfig {
            lr: 0.03,
            accum_steps: 1,
            grad_clip: Some(2.0),
            epochs: 30,
            input_size: synthetic.image_size,
            resize_size: Some(synthetic.image_size),
            normalization: Normalization::Half,
            ..TrainConfig::default()
        };
        Self { model, train, data: DataSource::Synthetic(synthetic), eval: EvalConfig::default() }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HerbsError::InvalidConfig(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(HerbsError::InvalidConfig(format!("bad boolean `{v}` for `{key}`"))),
    }
}

/// Every accepted key, in the order of [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "variant",
    "backbone",
    "base_width",
    "num_stages",
    "activation",
    "neck_dim",
    "top_k",
    "lambda_m",
    "lambda_d",
    "lambda_l",
    "lambda_r",
    "temperature",
    "temperature_mode",
    "drop_mapping",
    "t_squared",
    "readout",
    "lr",
    "weight_decay",
    "momentum",
    "batch_size",
    "accum_steps",
    "epochs",
    "seed",
    "input_size",
    "resize_size",
    "normalization",
    "flip_prob",
    "blur_prob",
    "grad_clip",
    "data",
    "test_data",
    "synthetic.num_generic",
    "synthetic.fine_per_generic",
    "synthetic.image_size",
    "synthetic.patch_size",
    "synthetic.noise_level",
    "synthetic.samples_per_class",
    "synthetic.test_fraction",
    "synthetic.distractors",
    "generic_threshold",
    "heatmaps",
];

impl RunConfig {
    /// Key aliases accepted on the command line.
    pub fn canonical_key(key: &str) -> &str {
        match key {
            "λ_d" | "lambda-d" | "lambda_d" => "lambda_d",
            "λ_m" => "lambda_m",
            "λ_l" => "lambda_l",
            "λ_r" => "lambda_r",
            "T" | "t" => "temperature",
            other => other,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = Self::canonical_key(key.trim());
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "variant" => m.variant = v.parse()?,
            "backbone" => m.backbone.kind = v.parse::<BackboneKind>()?,
            "base_width" => m.backbone.base_width = parse(key, v)?,
            "num_stages" => m.backbone.num_stages = parse(key, v)?,
            "activation" => m.backbone.activation = Activation::parse(v)?,
            "neck_dim" => m.neck_dim = parse(key, v)?,
            "top_k" => m.top_k = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?,
            "lambda_m" => m.weights.merged = parse(key, v)?,
            "lambda_d" => m.weights.dropped = parse(key, v)?,
            "lambda_l" => m.weights.layer = parse(key, v)?,
            "lambda_r" => m.lambda_r = parse(key, v)?,
            "temperature" => m.temperature.initial = parse(key, v)?,
            "temperature_mode" => m.temperature.mode = TemperatureMode::parse(v)?,
            "drop_mapping" => m.drop_mapping = DropMapping::parse(v)?,
            "t_squared" => m.t_squared = parse_bool(key, v)?,
            "readout" => {
                m.readout = match v {
                    "pooled" => Readout::Pooled,
                    "selected-mean" | "selected_mean" => Readout::SelectedMean,
                    _ => return Err(HerbsError::InvalidConfig(format!("unknown readout `{v}`"))),
                }
            }
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "accum_steps" => t.accum_steps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "seed" => {
                t.seed = parse(key, v)?;
                m.seed = t.seed;
            }
            "input_size" => t.input_size = parse(key, v)?,
            "resize_size" => t.resize_size = if v == "auto" { None } else { Some(parse(key, v)?) },
            "normalization" => {
                t.normalization = match v {
                    "imagenet" => Normalization::Imagenet,
                    "half" => Normalization::Half,
                    _ => return Err(HerbsError::InvalidConfig(format!("unknown normalization `{v}`"))),
                }
            }
            "flip_prob" => t.flip_prob = parse(key, v)?,
            "blur_prob" => t.blur_prob = parse(key, v)?,
            "grad_clip" => t.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) },
            "data" => {
                self.data = if v == "synthetic" {
                    match &self.data {
                        DataSource::Synthetic(_) => self.data.clone(),
                        DataSource::Folder { .. } => DataSource::Synthetic(SyntheticSpec::default()),
                    }
                } else {
                    let test = match &self.data {
                        DataSource::Folder { test, .. } => test.clone(),
                        DataSource::Synthetic(_) => None,
                    };
                    DataSource::Folder { train: PathBuf::from(v), test }
                }
            }
            "test_data" => match &mut self.data {
                DataSource::Folder { test, .. } => *test = (v != "none").then(|| PathBuf::from(v)),
                DataSource::Synthetic(_) => {
                    return Err(HerbsError::InvalidConfig("test_data requires a folder `data` source".into()))
                }
            },
            "generic_threshold" => self.eval.generic_threshold = parse(key, v)?,
            "heatmaps" => self.eval.heatmaps = parse(key, v)?,
            k if k.starts_with("synthetic.") => {
                let DataSource::Synthetic(s) = &mut self.data else {
                    return Err(HerbsError::InvalidConfig(format!("`{k}` requires data = synthetic")));
                };
                match &k["synthetic.".len()..] {
                    "num_generic" => s.num_generic = parse(key, v)?,
                    "fine_per_generic" => s.fine_per_generic = parse(key, v)?,
                    "image_size" => s.image_size = parse(key, v)?,
                    "patch_size" => s.patch_size = parse(key, v)?,
                    "noise_level" => s.noise_level = parse(key, v)?,
                    "samples_per_class" => s.samples_per_class = parse(key, v)?,
                    "test_fraction" => s.test_fraction = parse(key, v)?,
                    "distractors" => s.distractors = parse(key, v)?,
                    _ => return Err(HerbsError::UnknownKey(k.to_string())),
                }
            }
            other => return Err(HerbsError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Defaults overlaid with `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HerbsError::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let syn = match &self.data {
            DataSource::Synthetic(s) => Some(s),
            DataSource::Folder { .. } => None,
        };
        Some(match Self::canonical_key(key) {
            "variant" => m.variant.to_string(),
            "backbone" => m.backbone.kind.to_string(),
            "base_width" => m.backbone.base_width.to_string(),
            "num_stages" => m.backbone.num_stages.to_string(),
            "activation" => m.backbone.activation.as_str().to_string(),
            "neck_dim" => m.neck_dim.to_string(),
            "top_k" => m.top_k.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
            "lambda_m" => m.weights.merged.to_string(),
            "lambda_d" => m.weights.dropped.to_string(),
            "lambda_l" => m.weights.layer.to_string(),
            "lambda_r" => m.lambda_r.to_string(),
            "temperature" => m.temperature.initial.to_string(),
            "temperature_mode" => m.temperature.mode.as_str().to_string(),
            "drop_mapping" => m.drop_mapping.as_str().to_string(),
            "t_squared" => m.t_squared.to_string(),
            "readout" => match m.readout {
                Readout::Pooled => "pooled".into(),
                Readout::SelectedMean => "selected-mean".into(),
            },
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "momentum" => t.momentum.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "accum_steps" => t.accum_steps.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "input_size" => t.input_size.to_string(),
            "resize_size" => t.resize().to_string(),
            "normalization" => match t.normalization {
                Normalization::Imagenet => "imagenet".into(),
                Normalization::Half => "half".into(),
            },
            "flip_prob" => t.flip_prob.to_string(),
            "blur_prob" => t.blur_prob.to_string(),
            "grad_clip" => t.grad_clip.map_or("none".into(), |c| c.to_string()),
            "data" => match &self.data {
                DataSource::Synthetic(_) => "synthetic".into(),
                DataSource::Folder { train, .. } => train.display().to_string(),
            },
            "test_data" => match &self.data {
                DataSource::Folder { test: Some(p), .. } => p.display().to_string(),
                _ => "none".into(),
            },
            "generic_threshold" => self.eval.generic_threshold.to_string(),
            "heatmaps" => self.eval.heatmaps.to_string(),
            k if k.starts_with("synthetic.") => {
                let s = syn?;
                match &k["synthetic.".len()..] {
                    "num_generic" => s.num_generic.to_string(),
                    "fine_per_generic" => s.fine_per_generic.to_string(),
                    "image_size" => s.image_size.to_string(),
                    "patch_size" => s.patch_size.to_string(),
                    "noise_level" => s.noise_level.to_string(),
                    "samples_per_class" => s.samples_per_class.to_string(),
                    "test_fraction" => s.test_fraction.to_string(),
                    "distractors" => s.distractors.to_string(),
                    _ => return None,
                }
            }
            _ => return None,
        })
    }

    /// Every key with its resolved value; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                if key.starts_with("synthetic.") && !matches!(self.data, DataSource::Synthetic(_)) {
                    continue;
                }
                if *key == "test_data" && matches!(self.data, DataSource::Synthetic(_)) {
                    continue;
                }
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        TemperatureSchedule::new(self.model.temperature.initial, self.model.temperature.mode)?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Split> {
        match &self.data {
            DataSource::Synthetic(spec) => make_synthetic_dataset(spec, self.train.seed),
            DataSource::Folder { train, test } => {
                let train_set = load_folder(train)?;
                let test_set = match test {
                    Some(p) => load_folder(p)?,
                    None => train_set.clone(),
                };
                if test_set.class_names != train_set.class_names {
                    return Err(HerbsError::Dataset("train and test class directories differ".into()));
                }
                Ok(Split { train: train_set, test: test_set })
            }
        }
    }

    pub fn build_net(&self, num_classes: usize) -> Result<HerbsNet> {
        let mut cfg = self.model.clone();
        cfg.num_classes = num_classes;
        cfg.seed = self.train.seed;
        HerbsNet::new(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda_d", "3.5").unwrap();
        cfg.set("top_k", "12, 6, 2, 1").unwrap();
        cfg.set("synthetic.noise_level", "0.2").unwrap();
        cfg.set("variant", "c").unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("lamda_d = 1"), Err(HerbsError::UnknownKey(k)) if k == "lamda_d"));
        assert!(matches!(RunConfig::parse("synthetic.colour = 2"), Err(HerbsError::UnknownKey(_))));
        assert!(RunConfig::parse("lr 0.1").is_err());
        assert!(RunConfig::parse("# comment only\n\nlr = 0.1 # trailing").is_ok());
    }

    #[test]
    fn aliases() {
        let mut cfg = RunConfig::default();
        cfg.set("λ_d", "7").unwrap();
        cfg.set("T", "128").unwrap();
        assert_eq!(cfg.model.weights.dropped, 7.0);
        assert_eq!(cfg.model.temperature.initial, 128.0);
    }

    #[test]
    fn large_scale_training_defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.batch_size, t.accum_steps, t.effective_batch()), (5e-4, 8, 4, 32));
        assert_eq!(t.resize(), 510);
        assert_eq!(TrainConfig { input_size: 448, ..t }.resize(), 600);
    }
}

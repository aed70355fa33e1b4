//! Flat `section.key=value` run configuration.

use std::path::{Path, PathBuf};

use crossmlp_autograd::{AdamConfig, InitPolicy};
use crossmlp_core::{LossWeights, ModelConfig};

use crate::error::{io_err, Result, TrainError};

/// Environment variable that replaces `train.seed`.
pub const SEED_ENV: &str = "CROSSMLP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelLoss {
    /// Both stages share one uncertainty map plus a consistency term.
    Refined,
    /// Independent uncertainty-weighted L1 per stage.
    Baseline,
}

impl PixelLoss {
    pub fn name(self) -> &'static str {
        match self {
            PixelLoss::Refined => "refined",
            PixelLoss::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "refined" => Some(PixelLoss::Refined),
            "baseline" => Some(PixelLoss::Baseline),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub pixel: PixelLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitPolicy,
    /// Save `step_<n>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Stop after this many steps in total; 0 means no cap.
    pub max_steps: u64,
    pub augment: bool,
    pub shuffle: bool,
    pub out_dir: PathBuf,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Centre crop applied to source images before resizing; 0 disables.
    pub source_center_crop: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig { weights: LossWeights::default(), pixel: PixelLoss::Refined },
            optim: AdamConfig::default(),
            train: TrainSettings {
                epochs: 35,
                batch_size: 4,
                seed: 0,
                init: InitPolicy::default(),
                checkpoint_every: 0,
                max_steps: 0,
                augment: true,
                shuffle: true,
                out_dir: PathBuf::from("runs/default"),
                precision: Precision::F32,
            },
            data: DataSettings {
                train_manifest: PathBuf::from("data/manifest.txt"),
                test_manifest: PathBuf::from("data/manifest.txt"),
                source_center_crop: 0,
            },
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

fn num<V: std::str::FromStr>(v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true/false")),
    }
}

macro_rules! field {
    ($key:literal, $c:ident . $($path:ident).+, $parse:expr) => {
        (
            $key,
            (|$c: &RunConfig| $c.$($path).+.to_string()) as Getter,
            (|$c: &mut RunConfig, v: &str| {
                $c.$($path).+ = $parse(v)?;
                Ok(())
            }) as Setter,
        )
    };
}

/// Every key in serialisation order.
const FIELDS: &[(&str, Getter, Setter)] = &[
    field!("model.image_size", c.model.image_size, num),
    field!("model.semantic_classes", c.model.semantic_classes, num),
    field!("model.base_channels", c.model.base_channels, num),
    field!("model.downsamples", c.model.downsamples, num),
    field!("model.blocks", c.model.blocks, num),
    field!("model.mixer_layers", c.model.mixer_layers, num),
    field!("model.patch_size", c.model.patch_size, num),
    field!("model.token_dim", c.model.token_dim, num),
    field!("model.token_hidden", c.model.token_hidden, num),
    field!("model.channel_hidden", c.model.channel_hidden, num),
    field!("model.bridge_channels", c.model.bridge_channels, num),
    field!("model.candidates", c.model.candidates, num),
    field!("model.selection_width", c.model.selection_width, num),
    field!("model.gs_filters", c.model.gs_filters, num),
    field!("model.disc_filters", c.model.disc_filters, num),
    field!("loss.lambda_image", c.loss.weights.image, float),
    field!("loss.lambda_semantic", c.loss.weights.semantic, float),
    field!("loss.lambda_tv", c.loss.weights.tv, float),
    (
        "loss.pixel",
        |c| c.loss.pixel.name().to_string(),
        |c, v| {
            c.loss.pixel = PixelLoss::parse(v).ok_or_else(|| format!("`{v}` is not refined|baseline"))?;
            Ok(())
        },
    ),
    field!("optim.lr", c.optim.lr, float),
    field!("optim.beta1", c.optim.beta1, float),
    field!("optim.beta2", c.optim.beta2, float),
    field!("optim.eps", c.optim.eps, float),
    field!("train.epochs", c.train.epochs, num),
    field!("train.batch_size", c.train.batch_size, num),
    field!("train.seed", c.train.seed, num),
    (
        "train.init",
        |c| c.train.init.to_string(),
        |c, v| {
            c.train.init = v.parse().map_err(|e: crossmlp_autograd::TensorError| e.to_string())?;
            Ok(())
        },
    ),
    field!("train.checkpoint_every", c.train.checkpoint_every, num),
    field!("train.max_steps", c.train.max_steps, num),
    field!("train.augment", c.train.augment, flag),
    field!("train.shuffle", c.train.shuffle, flag),
    (
        "train.out_dir",
        |c| c.train.out_dir.display().to_string(),
        |c, v| {
            c.train.out_dir = v.into();
            Ok(())
        },
    ),
    (
        "train.precision",
        |c| c.train.precision.name().to_string(),
        |c, v| {
            c.train.precision = match v {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(format!("`{v}` is not f32|f64")),
            };
            Ok(())
        },
    ),
    (
        "data.train_manifest",
        |c| c.data.train_manifest.display().to_string(),
        |c, v| {
            c.data.train_manifest = v.into();
            Ok(())
        },
    ),
    (
        "data.test_manifest",
        |c| c.data.test_manifest.display().to_string(),
        |c, v| {
            c.data.test_manifest = v.into();
            Ok(())
        },
    ),
    field!("data.source_center_crop", c.data.source_center_crop, num),
];

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        FIELDS.iter().map(|(k, _, _)| *k)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        FIELDS.iter().find(|(k, _, _)| *k == key).map(|(_, get, _)| get(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, set) = FIELDS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| TrainError::Config(format!("unknown key `{key}`")))?;
        set(self, value).map_err(|msg| TrainError::Config(format!("{key}: {msg}")))
    }

    /// Starts from the defaults. Unknown and repeated keys are errors;
    /// `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| TrainError::ConfigLine { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !FIELDS.iter().any(|(k, _, _)| *k == key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("`{key}` given twice")));
            }
            config.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        FIELDS.iter().map(|(k, get, _)| format!("{k}={}\n", get(self))).collect()
    }

    /// Reads `path`, resolves relative paths against its directory and
    /// applies the seed override.
    pub fn load(path: &Path, seed_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.train.out_dir, &mut config.data.train_manifest, &mut config.data.test_manifest] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.apply_seed_override(seed_override)?;
        Ok(config)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(TrainError::Config("train.batch_size must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid optimiser settings {o:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model.blocks, 9);
        assert_eq!(c.model.mixer_layers, 7);
        assert_eq!(c.loss.weights, LossWeights { image: 0.5, semantic: 0.5, tv: 1.0 });
        assert_eq!(c.optim, AdamConfig { lr: 0.0002, beta1: 0.5, beta2: 0.999, eps: 1e-8 });
        assert_eq!(c.train.init, InitPolicy::Gaussian { std: 0.02 });
        assert_eq!(c.train.batch_size, 4);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.optim.lr = 0.1 + 0.2;
        c.loss.weights.tv = 1e-7;
        c.loss.pixel = PixelLoss::Baseline;
        c.train.init = InitPolicy::Xavier;
        c.train.out_dir = "some dir/x".into();
        c.train.precision = Precision::F64;
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(text.lines().count(), RunConfig::keys().count());
    }

    #[test]
    fn partial_files_and_comments() {
        let c = RunConfig::parse("# toy\nmodel.blocks = 3\n\noptim.lr=0.001\ntrain.init=gaussian:0.2\n").unwrap();
        assert_eq!(c.model.blocks, 3);
        assert_eq!(c.optim.lr, 0.001);
        assert_eq!(c.train.init, InitPolicy::Gaussian { std: 0.2 });
        assert_eq!(c.model.mixer_layers, 7);
    }

    #[test]
    fn errors() {
        for bad in [
            "model.nope=1",
            "blocks=3",
            "model.blocks",
            "model.blocks=three",
            "model.blocks=3\nmodel.blocks=4",
            "train.init=uniform",
            "train.augment=yes",
            "loss.pixel=l2",
            "optim.lr=nan",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        let err = RunConfig::parse("model.blocks=3\nmodel.colour=2").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("model.colour"), "{err}");
    }

    #[test]
    fn seed_override_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "train.seed=5\ntrain.out_dir=out\ndata.train_manifest=/abs/m.txt\n").unwrap();
        let c = RunConfig::load(&path, None).unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.out_dir, dir.path().join("out"));
        assert_eq!(c.data.train_manifest, PathBuf::from("/abs/m.txt"));
        assert_eq!(RunConfig::load(&path, Some("42")).unwrap().train.seed, 42);
        assert!(RunConfig::load(&path, Some("-1")).is_err());
    }
}

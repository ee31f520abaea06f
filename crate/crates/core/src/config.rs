//! Run configuration: one TOML file with a section per concern.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DEFAULT_IMAGE_DIMS, DEFAULT_SPLIT_RATIOS};
use crate::inference::AdaptiveCropConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    pub images: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Candidate rail pairs per image, input of `annotate`.
    pub rails: Option<PathBuf>,
    /// Split file written by `split`.
    pub split: Option<PathBuf>,
    /// Dimensions assumed for records that omit them.
    pub default_dims: (u32, u32),
}

impl Default for DatasetPaths {
    fn default() -> Self {
        Self { images: None, annotations: None, rails: None, split: None, default_dims: DEFAULT_IMAGE_DIMS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, ratios: DEFAULT_SPLIT_RATIOS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub count: usize,
    pub scene: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { seed: 0, count: 250, scene: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// One crop for every frame; the full frame unless `inference.crop` is set.
    #[default]
    Fixed,
    /// Starts from the full frame and follows the predictions.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub crop_mode: CropMode,
    /// Fixed crop `[left, top, right, bottom]`.
    pub crop: Option<[f64; 4]>,
    pub adaptive: AdaptiveCropConfig,
    pub overlays: bool,
    pub benchmark_iterations: usize,
    pub benchmark_warmup: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            crop_mode: CropMode::Fixed,
            crop: None,
            adaptive: AdaptiveCropConfig::default(),
            overlays: false,
            benchmark_iterations: 100,
            benchmark_warmup: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    pub split: SplitConfig,
    pub synth: SynthSection,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

/// Which paths a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Images,
    Annotations,
    Rails,
    Split,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(v) => Error::InvalidConfig(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Every violated constraint, including missing or nonexistent paths in `needs`.
    pub fn violations(&self, needs: &[Needs]) -> Vec<String> {
        let mut v = Vec::new();
        let d = &self.dataset;
        for need in needs {
            let (key, path, dir) = match need {
                Needs::Images => ("dataset.images", &d.images, true),
                Needs::Annotations => ("dataset.annotations", &d.annotations, false),
                Needs::Rails => ("dataset.rails", &d.rails, false),
                Needs::Split => ("dataset.split", &d.split, false),
            };
            match path {
                None => v.push(format!("{key} is required")),
                Some(p) if dir && !p.is_dir() => v.push(format!("{key}: directory {} does not exist", p.display())),
                Some(p) if !dir && !p.is_file() => v.push(format!("{key}: file {} does not exist", p.display())),
                Some(_) => {}
            }
        }
        if d.default_dims.0 == 0 || d.default_dims.1 == 0 {
            v.push("dataset.default_dims must be positive".into());
        }
        let r = &self.split.ratios;
        if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            v.push(format!("split.ratios {r:?} must lie in [0, 1] and sum to 1"));
        }
        if self.synth.count == 0 {
            v.push("synth.count must be positive".into());
        }
        if self.synth.scene.width < 16 || self.synth.scene.height < 16 {
            v.push("synth.scene dimensions must be at least 16 px".into());
        }
        v.extend(self.train.violations());
        v.extend(self.inference.adaptive.violations());
        if let Some([l, t, r, b]) = self.inference.crop {
            if !(l < r && t < b) {
                v.push(format!("inference.crop [{l}, {t}, {r}, {b}] has no area"));
            }
        }
        if self.inference.benchmark_iterations == 0 {
            v.push("inference.benchmark_iterations must be positive".into());
        }
        v
    }

    pub fn validate(&self, needs: &[Needs]) -> Result<()> {
        let v = self.violations(needs);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneId, Paradigm};

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.dataset.images = Some("data/images".into());
        cfg.train.paradigm = Paradigm::Segmentation;
        cfg.train.backbone = BackboneId::EfficientNetB2;
        cfg.train.epochs = Some(12);
        cfg.train.augmentation.work_size = 96;
        cfg.inference.crop = Some([1.0, 2.0, 30.0, 40.0]);
        cfg.inference.crop_mode = CropMode::Adaptive;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::from_toml("[train.augmentation]\nwork_size = 128\n").is_ok());
    }

    #[test]
    fn violations_are_all_listed() {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 0;
        cfg.split.ratios = [0.5, 0.5, 0.5];
        cfg.dataset.annotations = Some("/definitely/not/here.json".into());
        let v = cfg.violations(&[Needs::Images, Needs::Annotations]);
        assert_eq!(v.len(), 4, "{v:?}");
    }
}

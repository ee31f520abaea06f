//! Encoder plus one of three prediction heads: anchor regression, row-wise
//! classification or a U-Net style segmentation decoder.

pub mod backbone;
pub mod layers;
pub mod ops;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneId, BackboneSpec};
use layers::{no_grad, sigmoid, upsample2x, with_mac_counter, Conv2d, ConvBn, Linear, ParamBuilder, ParamStore};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Regression,
    Classification,
    Segmentation,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Self::Regression, Self::Classification, Self::Segmentation];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Regression => "regression",
            Self::Classification => "classification",
            Self::Segmentation => "segmentation",
        }
    }

    /// Epoch budget used when a run does not set one.
    pub fn default_epochs(&self) -> usize {
        match self {
            Self::Regression => 400,
            Self::Segmentation => 300,
            Self::Classification => 200,
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" | "reg" => Ok(Self::Regression),
            "classification" | "cls" => Ok(Self::Classification),
            "segmentation" | "seg" => Ok(Self::Segmentation),
            _ => Err(Error::InvalidArgument(format!("unknown paradigm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionHeadSpec {
    pub pool_filters: usize,
    pub hidden: usize,
    pub anchors: usize,
}

impl Default for RegressionHeadSpec {
    fn default() -> Self {
        Self { pool_filters: 8, hidden: 2048, anchors: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationHeadSpec {
    pub rails: usize,
    pub anchors: usize,
    /// Column bins; one background class is added on top.
    pub columns: usize,
    pub pool_filters: usize,
    pub hidden: usize,
}

impl Default for ClassificationHeadSpec {
    fn default() -> Self {
        Self { rails: 2, anchors: 64, columns: 128, pool_filters: 8, hidden: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationHeadSpec {
    /// Output channels of the decoder stages, from stride 16 up to stride 2.
    pub decoder_widths: [usize; 4],
}

impl Default for SegmentationHeadSpec {
    fn default() -> Self {
        Self { decoder_widths: [256, 128, 64, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "paradigm", rename_all = "lowercase")]
pub enum HeadSpec {
    Regression(RegressionHeadSpec),
    Classification(ClassificationHeadSpec),
    Segmentation(SegmentationHeadSpec),
}

impl HeadSpec {
    pub fn default_for(paradigm: Paradigm) -> Self {
        match paradigm {
            Paradigm::Regression => Self::Regression(Default::default()),
            Paradigm::Classification => Self::Classification(Default::default()),
            Paradigm::Segmentation => Self::Segmentation(Default::default()),
        }
    }

    pub fn paradigm(&self) -> Paradigm {
        match self {
            Self::Regression(_) => Paradigm::Regression,
            Self::Classification(_) => Paradigm::Classification,
            Self::Segmentation(_) => Paradigm::Segmentation,
        }
    }

    /// Anchor rows of the path representation, when there is one.
    pub fn anchors(&self) -> Option<usize> {
        match self {
            Self::Regression(r) => Some(r.anchors),
            Self::Classification(c) => Some(c.anchors),
            Self::Segmentation(_) => None,
        }
    }

    /// Per-sample output shape for a square input of side `input_size`.
    pub fn output_shape(&self, input_size: usize) -> Vec<usize> {
        match self {
            Self::Regression(r) => vec![2 * r.anchors + 1],
            Self::Classification(c) => vec![c.rails, c.anchors, c.columns + 1],
            Self::Segmentation(_) => vec![1, input_size, input_size],
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive = |name: &str, x: usize| {
            if x == 0 {
                v.push(format!("head.{name} must be positive"));
            }
        };
        match self {
            Self::Regression(r) => {
                positive("pool_filters", r.pool_filters);
                positive("hidden", r.hidden);
                positive("anchors", r.anchors);
            }
            Self::Classification(c) => {
                positive("rails", c.rails);
                positive("anchors", c.anchors);
                positive("columns", c.columns);
                positive("pool_filters", c.pool_filters);
                positive("hidden", c.hidden);
            }
            Self::Segmentation(s) => s.decoder_widths.iter().for_each(|&w| positive("decoder_widths", w)),
        }
        v
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    /// Side of the square input.
    pub input_size: usize,
}

impl ModelSpec {
    pub fn new(backbone: BackboneId, head: HeadSpec, input_size: usize) -> Self {
        Self { backbone: BackboneSpec::new(backbone), head, input_size }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.head.violations();
        if self.input_size == 0 || self.input_size % self.backbone.output_stride != 0 {
            v.push(format!("model.input_size must be a positive multiple of {}", self.backbone.output_stride));
        }
        if self.backbone != BackboneSpec::new(self.backbone.id) {
            v.push(format!("backbone layout does not match {}", self.backbone.id));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Spatial side of the final feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.backbone.output_stride
    }
}

#[derive(Debug, Clone)]
struct DenseHead {
    pool: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl DenseHead {
    fn new(pb: &mut ParamBuilder, cin: usize, feature_size: usize, filters: usize, hidden: usize, out: usize) -> candle_core::Result<Self> {
        Ok(Self {
            pool: Conv2d::new(pb, "head.pool", cin, filters, 1, 1, 1, true)?,
            fc1: Linear::new(pb, "head.fc1", filters * feature_size * feature_size, hidden)?,
            fc2: Linear::new(pb, "head.fc2", hidden, out)?,
        })
    }

    fn forward(&self, feat: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.pool.forward(feat)?.flatten_from(1)?;
        self.fc2.forward(&self.fc1.forward(&y)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct UNetDecoder {
    stages: Vec<(ConvBn, ConvBn)>,
    out: Conv2d,
}

impl UNetDecoder {
    fn new(pb: &mut ParamBuilder, skips: &[usize; 5], widths: &[usize; 4]) -> candle_core::Result<Self> {
        let mut cin = skips[4];
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let skip = skips[3 - i];
            let n = |s: &str| format!("head.decoder.{i}.{s}");
            let a = ConvBn::new(pb, &n("conv1"), &n("bn1"), cin + skip, w, 3, 1, 1)?;
            let b = ConvBn::new(pb, &n("conv2"), &n("bn2"), w, w, 3, 1, 1)?;
            stages.push((a, b));
            cin = w;
        }
        Ok(Self { stages, out: Conv2d::new(pb, "head.out", cin, 1, 1, 1, 1, true)? })
    }

    fn forward(&self, feats: &[Tensor], train: bool) -> candle_core::Result<Tensor> {
        let mut y = feats[4].clone();
        for (i, (a, b)) in self.stages.iter().enumerate() {
            let up = upsample2x(&y)?;
            let cat = Tensor::cat(&[&up, &feats[3 - i]], 1)?;
            y = b.forward(&a.forward(&cat, train)?.relu()?, train)?.relu()?;
        }
        upsample2x(&self.out.forward(&y)?)
    }
}

#[derive(Debug, Clone)]
enum Head {
    Dense(DenseHead),
    UNet(UNetDecoder),
}

/// A trainable ego-path model.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    backbone: Backbone,
    head: Head,
    params: ParamStore,
    device: Device,
}

/// Prefix of encoder variable names.
pub const BACKBONE_PREFIX: &str = "backbone.";

impl Model {
    /// Builds a randomly initialized model; `seed` fixes the initialization.
    pub fn new(spec: &ModelSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut pb = ParamBuilder::new(device, seed);
        let backbone = Backbone::new(&mut pb, BACKBONE_PREFIX, &spec.backbone)?;
        let cin = spec.backbone.out_channels();
        let fs = spec.feature_size();
        let head = match &spec.head {
            HeadSpec::Regression(r) => Head::Dense(DenseHead::new(&mut pb, cin, fs, r.pool_filters, r.hidden, 2 * r.anchors + 1)?),
            HeadSpec::Classification(c) => {
                Head::Dense(DenseHead::new(&mut pb, cin, fs, c.pool_filters, c.hidden, c.rails * c.anchors * (c.columns + 1))?)
            }
            HeadSpec::Segmentation(s) => Head::UNet(UNetDecoder::new(&mut pb, &spec.backbone.stage_channels, &s.decoder_widths)?),
        };
        Ok(Self { spec: spec.clone(), backbone, head, params: pb.finish(), device: device.clone() })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn paradigm(&self) -> Paradigm {
        self.spec.head.paradigm()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.spec.input_size;
        match x.dims() {
            [_, 3, h, w] if *h == r && *w == r => Ok(()),
            dims => Err(Error::InvalidArgument(format!("expected input (N, 3, {r}, {r}), got {dims:?}"))),
        }
    }

    /// Raw head output: `(N, 2H+1)`, `(N, C, H, W+1)` or `(N, 1, R, R)`
    /// logits. Outside training no computation graph is kept.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let run = || -> candle_core::Result<Tensor> {
            let feats = self.backbone.forward(x, train)?;
            match (&self.head, &self.spec.head) {
                (Head::Dense(h), HeadSpec::Classification(c)) => h.forward(&feats[4])?.reshape(((), c.rails, c.anchors, c.columns + 1)),
                (Head::Dense(h), _) => h.forward(&feats[4]),
                (Head::UNet(d), _) => d.forward(&feats, train),
            }
        };
        Ok(if train { run()? } else { no_grad(run)? })
    }

    fn expect(&self, paradigm: Paradigm) -> Result<()> {
        if self.paradigm() == paradigm {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("model has a {} head, not {paradigm}", self.paradigm())))
        }
    }

    /// Prediction vectors `(N, 2H+1)`: unbounded x-values, then the y-limit in `(0, 1)`.
    pub fn forward_regression(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.expect(Paradigm::Regression)?;
        Ok(regression_output(&self.forward(x, train)?)?)
    }

    /// Logit grids `(N, C, H, W+1)`.
    pub fn forward_classification(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.expect(Paradigm::Classification)?;
        self.forward(x, train)
    }

    /// Mask logits `(N, 1, R, R)`.
    pub fn forward_segmentation(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.expect(Paradigm::Segmentation)?;
        self.forward(x, train)
    }

    /// Trainable parameters and multiply-accumulates of one forward pass.
    pub fn params_and_macs(&self) -> Result<(usize, u64)> {
        let r = self.spec.input_size;
        let x = Tensor::zeros((1, 3, r, r), DType::F32, &self.device)?;
        let (out, macs) = with_mac_counter(|| self.forward(&x, false));
        out?;
        Ok((self.parameter_count(), macs))
    }

    /// Copies matching tensors into the model's variables. With `prefix`,
    /// only variables under it are considered and the prefix is stripped
    /// before lookup. Returns the number of variables set; every considered
    /// variable must be present with the right shape.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<usize> {
        let mut missing = Vec::new();
        let mut loaded = 0;
        for (name, var) in self.params.iter() {
            let Some(key) = name.strip_prefix(prefix) else { continue };
            match tensors.get(key) {
                Some(t) if t.dims() == var.dims() => {
                    var.set(&t.to_dtype(var.dtype())?.to_device(&self.device)?)?;
                    loaded += 1;
                }
                Some(t) => return Err(Error::Checkpoint(format!("{key}: shape {:?}, model expects {:?}", t.dims(), var.dims()))),
                None => missing.push(key.to_owned()),
            }
        }
        if !missing.is_empty() {
            let shown: Vec<_> = missing.iter().take(5).cloned().collect();
            return Err(Error::Checkpoint(format!("{} variable(s) missing, e.g. {}", missing.len(), shown.join(", "))));
        }
        Ok(loaded)
    }

    /// Loads ImageNet encoder weights stored with torchvision names.
    pub fn load_pretrained_backbone(&self, path: impl AsRef<Path>) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        self.load_tensors(&tensors, BACKBONE_PREFIX)
    }

    /// Writes all variables plus the model spec, a configuration fingerprint
    /// and free-form metadata.
    pub fn save(&self, path: impl AsRef<Path>, fingerprint: &str, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        meta.insert(META_SPEC.into(), serde_json::to_string(&self.spec)?);
        meta.insert(META_FINGERPRINT.into(), fingerprint.to_owned());
        let tensors: Vec<(String, Tensor)> = self.params.iter().map(|(n, v)| (n.clone(), v.as_tensor().detach())).collect();
        safetensors::serialize_to_file(tensors, Some(meta), path.as_ref()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Restores a model written by [`Model::save`].
    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut meta = header.metadata().clone().unwrap_or_default();
        let spec_json = meta.remove(META_SPEC).ok_or_else(|| Error::Checkpoint(format!("{}: no model spec", path.display())))?;
        let spec: ModelSpec = serde_json::from_str(&spec_json)?;
        let fingerprint = meta.remove(META_FINGERPRINT).unwrap_or_default();
        let model = Self::new(&spec, 0, device)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        model.load_tensors(&tensors, "")?;
        Ok((model, CheckpointMeta { spec, fingerprint, extra: meta.into_iter().collect() }))
    }
}

const META_SPEC: &str = "model_spec";
const META_FINGERPRINT: &str = "config_fingerprint";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub fingerprint: String,
    pub extra: BTreeMap<String, String>,
}

/// Applies the sigmoid to the last column of raw regression output.
pub fn regression_output(raw: &Tensor) -> candle_core::Result<Tensor> {
    let n = raw.dim(1)?;
    Tensor::cat(&[raw.narrow(1, 0, n - 1)?, sigmoid(&raw.narrow(1, n - 1, 1)?)?], 1)
}

/// Builds a model from its parts, optionally loading encoder weights.
pub fn build_model(backbone: &BackboneSpec, head: &HeadSpec, pretrained: Option<&Path>, input_size: usize, seed: u64, device: &Device) -> Result<Model> {
    let spec = ModelSpec { backbone: backbone.clone(), head: head.clone(), input_size };
    let model = Model::new(&spec, seed, device)?;
    if let Some(p) = pretrained {
        let n = model.load_pretrained_backbone(p)?;
        log::info!("loaded {n} pretrained encoder tensors from {}", p.display());
    }
    Ok(model)
}

/// Parameters and multiply-accumulates of `model` at its input size.
pub fn count_params_and_macs(model: &Model) -> Result<(usize, u64)> {
    model.params_and_macs()
}

/// Parameters and multiply-accumulates of the encoder alone.
pub fn encoder_params_and_macs(id: BackboneId, input_size: usize) -> Result<(usize, u64)> {
    let device = Device::Cpu;
    let spec = BackboneSpec::new(id);
    let mut pb = ParamBuilder::new(&device, 0);
    let backbone = Backbone::new(&mut pb, BACKBONE_PREFIX, &spec)?;
    let params = pb.finish().parameter_count();
    let x = Tensor::zeros((1, 3, input_size, input_size), DType::F32, &device)?;
    let (out, macs) = with_mac_counter(|| no_grad(|| backbone.forward(&x, false)));
    out?;
    Ok((params, macs))
}

//! Residual and EfficientNet encoders returning features at strides 2, 4, 8,
//! 16 and 32. Variable names follow the torchvision layouts so converted
//! ImageNet weights load by name.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, silu, Conv2d, ConvBn, ParamBuilder};
use super::ops;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "resnet18")]
    ResNet18,
    #[serde(rename = "resnet34")]
    ResNet34,
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "efficientnet-b0")]
    EfficientNetB0,
    #[serde(rename = "efficientnet-b1")]
    EfficientNetB1,
    #[serde(rename = "efficientnet-b2")]
    EfficientNetB2,
    #[serde(rename = "efficientnet-b3")]
    EfficientNetB3,
}

impl BackboneId {
    pub const ALL: [BackboneId; 7] = [
        Self::ResNet18,
        Self::ResNet34,
        Self::ResNet50,
        Self::EfficientNetB0,
        Self::EfficientNetB1,
        Self::EfficientNetB2,
        Self::EfficientNetB3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::ResNet18 => "resnet18",
            Self::ResNet34 => "resnet34",
            Self::ResNet50 => "resnet50",
            Self::EfficientNetB0 => "efficientnet-b0",
            Self::EfficientNetB1 => "efficientnet-b1",
            Self::EfficientNetB2 => "efficientnet-b2",
            Self::EfficientNetB3 => "efficientnet-b3",
        }
    }

    /// Short tag as used in model names (`rn18`, `enb0`, ...).
    pub fn short(&self) -> &'static str {
        match self {
            Self::ResNet18 => "rn18",
            Self::ResNet34 => "rn34",
            Self::ResNet50 => "rn50",
            Self::EfficientNetB0 => "enb0",
            Self::EfficientNetB1 => "enb1",
            Self::EfficientNetB2 => "enb2",
            Self::EfficientNetB3 => "enb3",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Self::ALL
            .into_iter()
            .find(|id| key == id.name().replace('-', "") || key == id.short())
            .ok_or_else(|| Error::UnsupportedBackbone(s.to_owned()))
    }
}

/// Encoder family, variant and feature-map layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    /// Channels of the stride-2, 4, 8, 16 and 32 feature maps.
    pub stage_channels: [usize; 5],
    pub output_stride: usize,
}

impl BackboneSpec {
    pub fn new(id: BackboneId) -> Self {
        let stage_channels = match id {
            BackboneId::ResNet18 | BackboneId::ResNet34 => [64, 64, 128, 256, 512],
            BackboneId::ResNet50 => [64, 256, 512, 1024, 2048],
            _ => {
                let (w, _) = efficientnet_multipliers(id);
                let s = efficientnet_stages(w, 1.0);
                [s[0].out, s[1].out, s[2].out, s[4].out, s[6].out]
            }
        };
        Self { id, stage_channels, output_stride: 32 }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels[4]
    }
}

#[derive(Debug, Clone)]
enum ResBlock {
    Basic { c1: ConvBn, c2: ConvBn, down: Option<ConvBn> },
    Bottleneck { c1: ConvBn, c2: ConvBn, c3: ConvBn, down: Option<ConvBn> },
}

impl ResBlock {
    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let (y, down) = match self {
            Self::Basic { c1, c2, down } => (c2.forward(&c1.forward(x, train)?.relu()?, train)?, down),
            Self::Bottleneck { c1, c2, c3, down } => {
                let y = c1.forward(x, train)?.relu()?;
                let y = c2.forward(&y, train)?.relu()?;
                (c3.forward(&y, train)?, down)
            }
        };
        let skip = match down {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    stem: ConvBn,
    layers: Vec<Vec<ResBlock>>,
}

impl ResNet {
    fn new(pb: &mut ParamBuilder, prefix: &str, id: BackboneId) -> candle_core::Result<Self> {
        let (depths, bottleneck) = match id {
            BackboneId::ResNet18 => ([2, 2, 2, 2], false),
            BackboneId::ResNet34 => ([3, 4, 6, 3], false),
            _ => ([3, 4, 6, 3], true),
        };
        let p = |s: &str| format!("{prefix}{s}");
        let stem = ConvBn::new(pb, &p("conv1"), &p("bn1"), 3, 64, 7, 2, 1)?;
        let expansion = if bottleneck { 4 } else { 1 };
        let mut cin = 64;
        let mut layers = Vec::new();
        for (li, &depth) in depths.iter().enumerate() {
            let width = 64 << li;
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let n = |s: &str| p(&format!("layer{}.{bi}.{s}", li + 1));
                let cout = width * expansion;
                let down = if stride != 1 || cin != cout {
                    Some(ConvBn::new(pb, &n("downsample.0"), &n("downsample.1"), cin, cout, 1, stride, 1)?)
                } else {
                    None
                };
                let block = if bottleneck {
                    ResBlock::Bottleneck {
                        c1: ConvBn::new(pb, &n("conv1"), &n("bn1"), cin, width, 1, 1, 1)?,
                        c2: ConvBn::new(pb, &n("conv2"), &n("bn2"), width, width, 3, stride, 1)?,
                        c3: ConvBn::new(pb, &n("conv3"), &n("bn3"), width, cout, 1, 1, 1)?,
                        down,
                    }
                } else {
                    ResBlock::Basic {
                        c1: ConvBn::new(pb, &n("conv1"), &n("bn1"), cin, width, 3, stride, 1)?,
                        c2: ConvBn::new(pb, &n("conv2"), &n("bn2"), width, width, 3, 1, 1)?,
                        down,
                    }
                };
                blocks.push(block);
                cin = cout;
            }
            layers.push(blocks);
        }
        Ok(Self { stem, layers })
    }

    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Vec<Tensor>> {
        let s2 = self.stem.forward(x, train)?.relu()?;
        let mut y = ops::max_pool2d(&s2, 3, 2, 1)?;
        let mut feats = vec![s2];
        for layer in &self.layers {
            for b in layer {
                y = b.forward(&y, train)?;
            }
            feats.push(y.clone());
        }
        Ok(feats)
    }
}

#[derive(Debug, Clone, Copy)]
struct StageConfig {
    expand: usize,
    kernel: usize,
    stride: usize,
    cin: usize,
    out: usize,
    layers: usize,
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d);
    if n < 0.9 * v {
        n += d;
    }
    n as usize
}

fn efficientnet_multipliers(id: BackboneId) -> (f64, f64) {
    match id {
        BackboneId::EfficientNetB0 => (1.0, 1.0),
        BackboneId::EfficientNetB1 => (1.0, 1.1),
        BackboneId::EfficientNetB2 => (1.1, 1.2),
        _ => (1.2, 1.4),
    }
}

fn efficientnet_stages(width: f64, depth: f64) -> Vec<StageConfig> {
    let base = [(1, 3, 1, 32, 16, 1), (6, 3, 2, 16, 24, 2), (6, 5, 2, 24, 40, 2), (6, 3, 2, 40, 80, 3), (6, 5, 1, 80, 112, 3), (6, 5, 2, 112, 192, 4), (6, 3, 1, 192, 320, 1)];
    base.iter()
        .map(|&(expand, kernel, stride, cin, out, layers)| StageConfig {
            expand,
            kernel,
            stride,
            cin: make_divisible(cin as f64 * width, 8),
            out: make_divisible(out as f64 * width, 8),
            layers: (layers as f64 * depth).ceil() as usize,
        })
        .collect()
}

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se_reduce: Conv2d,
    se_expand: Conv2d,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut y = x.clone();
        if let Some(e) = &self.expand {
            y = silu(&e.forward(&y, train)?)?;
        }
        y = silu(&self.depthwise.forward(&y, train)?)?;
        let s = y.mean_keepdim((2, 3))?;
        let s = sigmoid(&self.se_expand.forward(&silu(&self.se_reduce.forward(&s)?)?)?)?;
        y = y.broadcast_mul(&s)?;
        y = self.project.forward(&y, train)?;
        if self.residual {
            y = (y + x)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct EfficientNet {
    stem: ConvBn,
    stages: Vec<Vec<MbConv>>,
}

impl EfficientNet {
    fn new(pb: &mut ParamBuilder, prefix: &str, id: BackboneId) -> candle_core::Result<Self> {
        let (w, d) = efficientnet_multipliers(id);
        let stages_cfg = efficientnet_stages(w, d);
        let p = |s: &str| format!("{prefix}features.{s}");
        let stem = ConvBn::new(pb, &p("0.0"), &p("0.1"), 3, stages_cfg[0].cin, 3, 2, 1)?;
        let mut stages = Vec::new();
        for (si, cfg) in stages_cfg.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.layers {
                let cin = if bi == 0 { cfg.cin } else { cfg.out };
                let stride = if bi == 0 { cfg.stride } else { 1 };
                let hidden = make_divisible(cin as f64 * cfg.expand as f64, 8);
                let n = |s: &str| p(&format!("{}.{bi}.block.{s}", si + 1));
                let mut idx = 0;
                let expand = if hidden != cin {
                    idx += 1;
                    Some(ConvBn::new(pb, &n("0.0"), &n("0.1"), cin, hidden, 1, 1, 1)?)
                } else {
                    None
                };
                let depthwise = ConvBn::new(pb, &n(&format!("{idx}.0")), &n(&format!("{idx}.1")), hidden, hidden, cfg.kernel, stride, hidden)?;
                let squeeze = (cin / 4).max(1);
                let se_reduce = Conv2d::new(pb, &n(&format!("{}.fc1", idx + 1)), hidden, squeeze, 1, 1, 1, true)?;
                let se_expand = Conv2d::new(pb, &n(&format!("{}.fc2", idx + 1)), squeeze, hidden, 1, 1, 1, true)?;
                let project = ConvBn::new(pb, &n(&format!("{}.0", idx + 2)), &n(&format!("{}.1", idx + 2)), hidden, cfg.out, 1, 1, 1)?;
                blocks.push(MbConv { expand, depthwise, se_reduce, se_expand, project, residual: stride == 1 && cin == cfg.out });
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Vec<Tensor>> {
        let mut y = silu(&self.stem.forward(x, train)?)?;
        let mut feats = Vec::with_capacity(5);
        for (si, stage) in self.stages.iter().enumerate() {
            for b in stage {
                y = b.forward(&y, train)?;
            }
            // Last stage at each stride: 2, 4, 8, 16, 32.
            if matches!(si, 0 | 1 | 2 | 4 | 6) {
                feats.push(y.clone());
            }
        }
        Ok(feats)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    ResNet(ResNet),
    EfficientNet(EfficientNet),
}

impl Backbone {
    /// Registers the encoder's variables under `prefix`.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, spec: &BackboneSpec) -> candle_core::Result<Self> {
        Ok(match spec.id {
            BackboneId::ResNet18 | BackboneId::ResNet34 | BackboneId::ResNet50 => Self::ResNet(ResNet::new(pb, prefix, spec.id)?),
            _ => Self::EfficientNet(EfficientNet::new(pb, prefix, spec.id)?),
        })
    }

    /// Feature maps at strides 2, 4, 8, 16 and 32.
    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Vec<Tensor>> {
        match self {
            Self::ResNet(r) => r.forward(x, train),
            Self::EfficientNet(e) => e.forward(x, train),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_names_parse() {
        assert_eq!("rn18".parse::<BackboneId>().unwrap(), BackboneId::ResNet18);
        assert_eq!("ResNet-50".parse::<BackboneId>().unwrap(), BackboneId::ResNet50);
        assert_eq!("efficientnet_b3".parse::<BackboneId>().unwrap(), BackboneId::EfficientNetB3);
        assert_eq!("ENB1".parse::<BackboneId>().unwrap(), BackboneId::EfficientNetB1);
        assert!(matches!("vgg16".parse::<BackboneId>(), Err(Error::UnsupportedBackbone(_))));
    }

    #[test]
    fn scaled_channel_widths() {
        assert_eq!(make_divisible(32.0 * 1.1, 8), 32);
        assert_eq!(make_divisible(320.0 * 1.1, 8), 352);
        assert_eq!(make_divisible(320.0 * 1.2, 8), 384);
        assert_eq!(make_divisible(40.0 * 1.2, 8), 48);
        assert_eq!(BackboneSpec::new(BackboneId::EfficientNetB0).stage_channels, [16, 24, 40, 112, 320]);
        assert_eq!(BackboneSpec::new(BackboneId::EfficientNetB3).stage_channels, [24, 32, 48, 136, 384]);
    }
}

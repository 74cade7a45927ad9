//! Network bodies shared by the active learner and the segmentation generator.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, BatchNorm2d, Conv2d, ConvCfg, Linear, ParamStore};
use crate::seed::Rng;

/// Bottleneck residual block (1x1 -> 3x3 -> 1x1, expansion 4).
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        planes: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let out_c = planes * 4;
        let point = ConvCfg { stride: 1, padding: 0, dilation: 1 };
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_c, planes, 1, point, false)?;
        let bn1 = BatchNorm2d::new(store, rng, &format!("{name}.bn1"), planes)?;
        let cfg = ConvCfg { stride, padding: dilation, dilation };
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), planes, planes, 3, cfg, false)?;
        let bn2 = BatchNorm2d::new(store, rng, &format!("{name}.bn2"), planes)?;
        let conv3 = Conv2d::new(store, rng, &format!("{name}.conv3"), planes, out_c, 1, point, false)?;
        let bn3 = BatchNorm2d::new(store, rng, &format!("{name}.bn3"), out_c)?;
        let downsample = if stride != 1 || in_c != out_c {
            let cfg = ConvCfg { stride, padding: 0, dilation: 1 };
            Some((
                Conv2d::new(store, rng, &format!("{name}.downsample.0"), in_c, out_c, 1, cfg, false)?,
                BatchNorm2d::new(store, rng, &format!("{name}.downsample.1"), out_c)?,
            ))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, conv3, bn3, downsample })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResNetConfig {
    pub blocks: [usize; 4],
    /// Stem width; 64 reproduces the standard networks.
    pub width: usize,
    pub strides: [usize; 4],
    pub dilations: [usize; 4],
}

impl ResNetConfig {
    pub fn resnet50(width: usize) -> Self {
        Self { blocks: [3, 4, 6, 3], width, strides: [1, 2, 2, 2], dilations: [1; 4] }
    }

    pub fn resnet101(width: usize) -> Self {
        Self { blocks: [3, 4, 23, 3], width, strides: [1, 2, 2, 2], dilations: [1; 4] }
    }

    /// Output stride 8: the last two stages keep resolution and dilate instead.
    pub fn dilated(mut self) -> Self {
        self.strides = [1, 2, 1, 1];
        self.dilations = [1, 1, 2, 4];
        self
    }

    pub fn out_channels(&self) -> usize {
        self.width * 8 * 4
    }

    pub fn output_stride(&self) -> usize {
        4 * self.strides.iter().product::<usize>()
    }
}

/// Residual bottleneck backbone. The stem pools with a 2x2 window.
pub struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
    cfg: ResNetConfig,
}

impl ResNet {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_c: usize, cfg: ResNetConfig) -> Result<Self> {
        let stem_cfg = ConvCfg { stride: 2, padding: 3, dilation: 1 };
        let stem = Conv2d::new(store, rng, &format!("{name}.conv1"), in_c, cfg.width, 7, stem_cfg, false)?;
        let stem_bn = BatchNorm2d::new(store, rng, &format!("{name}.bn1"), cfg.width)?;
        let mut stages = Vec::new();
        let mut channels = cfg.width;
        for (s, &n_blocks) in cfg.blocks.iter().enumerate() {
            let planes = cfg.width << s;
            let mut stage = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let stride = if b == 0 { cfg.strides[s] } else { 1 };
                let block_name = format!("{name}.layer{}.{b}", s + 1);
                stage.push(Bottleneck::new(store, rng, &block_name, channels, planes, stride, cfg.dilations[s])?);
                channels = planes * 4;
            }
            stages.push(stage);
        }
        Ok(Self { stem, stem_bn, stages, cfg })
    }

    pub fn config(&self) -> ResNetConfig {
        self.cfg
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.stem_bn.forward(&self.stem.forward(x)?, train)?.relu()?.max_pool2d(2)?;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, train)?;
            }
        }
        Ok(y)
    }
}

/// Image classifier body choices for the active learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    SmallCnn,
    Residual50,
    Residual101,
    VggLike,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::SmallCnn => "small_cnn",
            Architecture::Residual50 => "residual_50",
            Architecture::Residual101 => "residual_101",
            Architecture::VggLike => "vgg_like",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Architecture::SmallCnn),
            "residual_50" => Ok(Architecture::Residual50),
            "residual_101" => Ok(Architecture::Residual101),
            "vgg_like" => Ok(Architecture::VggLike),
            other => Err(Error::config(format!("unknown learner architecture {other:?}"))),
        }
    }
}

enum Body {
    /// Conv stack; `None` entries are 2x2 max-pools.
    Plain(Vec<Option<Conv2d>>),
    Residual(ResNet),
}

/// Convolutional body + global average pooling + linear head, emitting logits.
pub struct Classifier {
    body: Body,
    head: Linear,
    pub store: ParamStore,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Classifier {
    pub fn new(arch: Architecture, in_channels: usize, num_classes: usize, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let plain = |store: &mut ParamStore, rng: &mut Rng, plan: &[Option<usize>]| -> Result<(Vec<Option<Conv2d>>, usize)> {
            let mut layers = Vec::new();
            let mut c = in_channels;
            for (i, step) in plan.iter().enumerate() {
                match step {
                    Some(out) => {
                        layers.push(Some(Conv2d::new(store, rng, &format!("features.{i}"), c, *out, 3, ConvCfg::same(3), true)?));
                        c = *out;
                    }
                    None => layers.push(None),
                }
            }
            Ok((layers, c))
        };
        let (body, feat) = match arch {
            Architecture::SmallCnn => {
                let (layers, c) = plain(&mut store, rng, &[Some(16), None, Some(32), None])?;
                (Body::Plain(layers), c)
            }
            Architecture::VggLike => {
                let plan = [Some(32), Some(32), None, Some(64), Some(64), None, Some(128), None];
                let (layers, c) = plain(&mut store, rng, &plan)?;
                (Body::Plain(layers), c)
            }
            Architecture::Residual50 | Architecture::Residual101 => {
                let cfg = if arch == Architecture::Residual50 { ResNetConfig::resnet50(64) } else { ResNetConfig::resnet101(64) };
                let net = ResNet::new(&mut store, rng, "backbone", in_channels, cfg)?;
                (Body::Residual(net), cfg.out_channels())
            }
        };
        let head = Linear::new(&mut store, rng, "fc", feat, num_classes)?;
        Ok(Self { body, head, store, architecture: arch, num_classes, in_channels })
    }

    /// (N, C, H, W) -> logits (N, num_classes)
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let features = match &self.body {
            Body::Plain(layers) => {
                let mut y = x.clone();
                for layer in layers {
                    y = match layer {
                        Some(conv) => conv.forward(&y)?.relu()?,
                        None => y.max_pool2d(2)?,
                    };
                }
                y
            }
            Body::Residual(net) => net.forward(x, train)?,
        };
        self.head.forward(&global_avg_pool(&features)?)
    }
}

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nets::{ResNet, ResNetConfig};
use crate::nn::{self, global_avg_pool, leaky_relu, log_softmax, sigmoid, Conv2d, ConvCfg, ConvTranspose2d, Linear, ParamStore};
use crate::pool::{ImageSample, PixelMask};
use crate::seed::Rng;

/// Lower/upper clamp applied to discriminator confidences before logs.
pub const CONFIDENCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegBackbone {
    /// Small two-scale encoder-decoder with a skip connection.
    EncoderDecoder,
    /// Dilated residual-101 body (output stride 8) with a four-rate atrous head.
    DilatedResidual,
}

impl fmt::Display for SegBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegBackbone::EncoderDecoder => "encoder_decoder",
            SegBackbone::DilatedResidual => "dilated_residual",
        })
    }
}

impl FromStr for SegBackbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_decoder" => Ok(SegBackbone::EncoderDecoder),
            "dilated_residual" => Ok(SegBackbone::DilatedResidual),
            other => Err(Error::config(format!("unknown segmentation backbone {other:?}"))),
        }
    }
}

struct EncoderDecoder {
    enc1: Conv2d,
    down: Conv2d,
    mid1: Conv2d,
    mid2: Conv2d,
    up: ConvTranspose2d,
    fuse: Conv2d,
    classify: Conv2d,
}

impl EncoderDecoder {
    fn new(store: &mut ParamStore, rng: &mut Rng, in_c: usize, width: usize, k: usize) -> Result<Self> {
        let w2 = width * 2;
        let down = ConvCfg { stride: 2, padding: 1, dilation: 1 };
        let point = ConvCfg { stride: 1, padding: 0, dilation: 1 };
        Ok(Self {
            enc1: Conv2d::new(store, rng, "enc1", in_c, width, 3, ConvCfg::same(3), true)?,
            down: Conv2d::new(store, rng, "down", width, w2, 3, down, true)?,
            mid1: Conv2d::new(store, rng, "mid1", w2, w2, 3, ConvCfg::dilated_same(3, 2), true)?,
            mid2: Conv2d::new(store, rng, "mid2", w2, w2, 3, ConvCfg::dilated_same(3, 4), true)?,
            up: ConvTranspose2d::new(store, rng, "up", w2, width, 2)?,
            fuse: Conv2d::new(store, rng, "fuse", width * 2, width, 3, ConvCfg::same(3), true)?,
            classify: Conv2d::new(store, rng, "classify", width, k, 1, point, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("encoder-decoder needs even input size, got {h}x{w}")));
        }
        let e1 = self.enc1.forward(x)?.relu()?;
        let e2 = self.down.forward(&e1)?.relu()?;
        let m = self.mid1.forward(&e2)?.relu()?;
        let m = self.mid2.forward(&m)?.relu()?;
        let d = self.up.forward(&m)?.relu()?;
        let f = self.fuse.forward(&Tensor::cat(&[&d, &e1], 1)?)?.relu()?;
        self.classify.forward(&f)
    }
}

struct DilatedResidual {
    body: ResNet,
    atrous: Vec<Conv2d>,
}

impl DilatedResidual {
    const RATES: [usize; 4] = [6, 12, 18, 24];

    fn new(store: &mut ParamStore, rng: &mut Rng, in_c: usize, width: usize, k: usize) -> Result<Self> {
        let cfg = ResNetConfig::resnet101(width).dilated();
        let body = ResNet::new(store, rng, "backbone", in_c, cfg)?;
        let atrous = Self::RATES
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv2d::new(store, rng, &format!("aspp.{i}"), cfg.out_channels(), k, 3, ConvCfg::dilated_same(3, r), true))
            .collect::<Result<_>>()?;
        Ok(Self { body, atrous })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let stride = self.body.config().output_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!("dilated backbone needs input divisible by {stride}, got {h}x{w}")));
        }
        let f = self.body.forward(x, train)?;
        let mut logits = self.atrous[0].forward(&f)?;
        for branch in &self.atrous[1..] {
            logits = (logits + branch.forward(&f)?)?;
        }
        Ok(logits.upsample_nearest2d(h, w)?)
    }
}

enum SegBody {
    EncoderDecoder(EncoderDecoder),
    DilatedResidual(DilatedResidual),
}

/// Generator: image (N, C, H, W) -> per-pixel class distribution (N, K, H, W).
pub struct Segmenter {
    body: SegBody,
    pub store: ParamStore,
    pub backbone: SegBackbone,
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
}

impl Segmenter {
    pub fn new(
        backbone: SegBackbone,
        in_channels: usize,
        num_classes: usize,
        width: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_classes < 2 || width == 0 {
            return Err(Error::config("segmenter needs at least two classes and positive width"));
        }
        let mut store = ParamStore::new(dtype);
        let body = match backbone {
            SegBackbone::EncoderDecoder => SegBody::EncoderDecoder(EncoderDecoder::new(&mut store, rng, in_channels, width, num_classes)?),
            SegBackbone::DilatedResidual => SegBody::DilatedResidual(DilatedResidual::new(&mut store, rng, in_channels, width, num_classes)?),
        };
        Ok(Self { body, store, backbone, in_channels, num_classes, width })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn forward_log_probs(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let logits = match &self.body {
            SegBody::EncoderDecoder(net) => net.forward(x)?,
            SegBody::DilatedResidual(net) => net.forward(x, train)?,
        };
        log_softmax(&logits, 1)
    }

    pub fn probabilities(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_log_probs(x, train)?.exp()?)
    }

    /// Arg-max masks in inference mode.
    pub fn predict_masks(&self, images: &[&ImageSample]) -> Result<Vec<PixelMask>> {
        let x = crate::active_learner::images_to_tensor(images, self.dtype())?;
        argmax_masks(&self.forward_log_probs(&x, false)?)
    }
}

/// Per-pixel arg-max of an (N, K, H, W) score map.
pub fn argmax_masks(scores: &Tensor) -> Result<Vec<PixelMask>> {
    let (_, k, h, w) = scores.dims4()?;
    let idx = scores.argmax(1)?.to_dtype(DType::U8)?.to_vec3::<u8>()?;
    idx.into_iter()
        .map(|plane| PixelMask::new(h, w, k, plane.into_iter().flatten().collect()))
        .collect()
}

/// Image-wise discriminator over (image ⊕ class map) inputs.
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Linear,
    dropout: f64,
    pub store: ParamStore,
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl Discriminator {
    pub fn new(in_channels: usize, channels: &[usize], dropout: f64, dtype: DType, rng: &mut Rng) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::config("discriminator needs at least one non-empty conv layer"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut store = ParamStore::new(dtype);
        let cfg = ConvCfg { stride: 2, padding: 1, dilation: 1 };
        let mut convs = Vec::new();
        let mut c = in_channels;
        for (i, &out) in channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, rng, &format!("conv{i}"), c, out, 4, cfg, true)?);
            c = out;
        }
        let head = Linear::new(&mut store, rng, "fc", c, 1)?;
        Ok(Self { convs, head, dropout, store, in_channels, channels: channels.to_vec() })
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("non-empty")
    }

    /// Spatially averaged activations of the last conv block, (N, F).
    /// Dropout is applied only when a generator is supplied.
    pub fn features(&self, x: &Tensor, mut dropout_rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut y = x.clone();
        for conv in &self.convs {
            y = leaky_relu(&conv.forward(&y)?, 0.2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                y = nn::dropout(&y, self.dropout, rng)?;
            }
        }
        global_avg_pool(&y)
    }

    /// Confidence in (0, 1) that each input pairs an image with a real mask, (N,).
    pub fn confidence_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let logits = self.head.forward(features)?.squeeze(D::Minus1)?;
        Ok(sigmoid(&logits)?.clamp(CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS)?)
    }

    pub fn confidence(&self, x: &Tensor, dropout_rng: Option<&mut Rng>) -> Result<Tensor> {
        self.confidence_from_features(&self.features(x, dropout_rng)?)
    }
}

//! Thin layer, initialization and optimizer helpers over `candle_core`.
//!
//! Everything stochastic (parameter init, dropout masks) draws from caller
//! supplied seeded generators, never from the backend's global RNG, so model
//! state is a pure function of the seeds.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

mod unfold;

pub fn device() -> Device {
    Device::Cpu
}

pub fn tensor_from_f32(data: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &device())?.to_dtype(dtype)?)
}

pub fn scalar(value: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(value, &device())?.to_dtype(dtype)?)
}

/// Scalar tensor value as f64.
pub fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattened tensor contents as f64.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(-b, b) with b = sqrt(6 / fan_in); suited to ReLU stacks.
    HeUniform { fan_in: usize },
    Uniform(f64),
    Const(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut Rng) -> Vec<f32> {
        match self {
            Init::HeUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b) as f32).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b) as f32).collect(),
            Init::Const(v) => vec![v as f32; n],
        }
    }
}

struct Param {
    name: String,
    var: Var,
    trainable: bool,
}

/// Named parameters of one model, in creation order.
pub struct ParamStore {
    dtype: DType,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, params: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn add(&mut self, name: String, shape: &[usize], init: Init, rng: &mut Rng, trainable: bool) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let n = shape.iter().product();
        let var = Var::from_tensor(&tensor_from_f32(init.sample(n, rng), shape, self.dtype)?)?;
        self.params.push(Param { name, var: var.clone(), trainable });
        Ok(var)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> Result<Var> {
        self.add(name.into(), shape, init, rng, true)
    }

    /// Non-trainable state saved with checkpoints (e.g. batch-norm running stats).
    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64, rng: &mut Rng) -> Result<Var> {
        self.add(name.into(), shape, Init::Const(value), rng, false)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.var.clone()).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.var.elem_count()).sum()
    }

    /// Flattened trainable values, in creation order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            out.extend(to_vec_f64(p.var.as_tensor())?);
        }
        Ok(out)
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (format!("{prefix}{}", p.name), p.var.as_tensor().clone())).collect()
    }

    /// Overwrite every parameter and buffer from `tensors`; all must be present
    /// with matching shapes.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for p in &self.params {
            let key = format!("{prefix}{}", p.name);
            let t = tensors.get(&key).ok_or_else(|| Error::invalid(format!("checkpoint lacks {key}")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::shape(format!("{key}: checkpoint {:?} vs model {:?}", t.dims(), p.var.dims())));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn save_tensors(path: &Path, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let map: HashMap<String, Tensor> = tensors.into_iter().collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    Ok(candle_core::safetensors::load(path, &device())?)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvCfg {
    /// Stride 1, padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, dilation: 1 }
    }

    pub fn dilated_same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, padding: dilation * (kernel / 2), dilation }
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    cfg: ConvCfg,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        cfg: ConvCfg,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.param(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], Init::HeUniform { fan_in }, rng)?;
        let bias = if bias { Some(store.param(format!("{name}.bias"), &[out_c], Init::Const(0.0), rng)?) } else { None };
        Ok(Self { weight, bias, cfg })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_channel_bias(conv2d_unfold(x, self.weight.as_tensor(), self.cfg)?, self.bias.as_ref())
    }
}

/// Convolution as patch extraction followed by one matrix product, so the
/// backward pass is two matrix products and a patch scatter.
pub fn conv2d_unfold(x: &Tensor, weight: &Tensor, cfg: ConvCfg) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::shape(format!("conv weight {:?} for input {:?}", weight.dims(), x.dims())));
    }
    let ConvCfg { stride, padding, dilation } = cfg;
    let span = dilation * (k - 1) + 1;
    if h + 2 * padding < span || w + 2 * padding < span {
        return Err(Error::shape(format!("input {h}x{w} smaller than the dilated kernel")));
    }
    let ho = (h + 2 * padding - span) / stride + 1;
    let wo = (w + 2 * padding - span) / stride + 1;
    let geometry = unfold::Geometry { n, c, h, w, k, stride, pad: padding, dilation, ho, wo };
    let cols = x.contiguous()?.apply_op1(unfold::Im2Col(geometry))?;
    let y = cols.matmul(&weight.reshape((o, c * k * k))?.t()?)?;
    Ok(y.reshape((n, ho, wo, o))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Transposed convolution with kernel == stride (exact upsampling by `stride`).
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let fan_in = in_c;
        let weight = store.param(format!("{name}.weight"), &[in_c, out_c, stride, stride], Init::HeUniform { fan_in }, rng)?;
        let bias = Some(store.param(format!("{name}.bias"), &[out_c], Init::Const(0.0), rng)?);
        Ok(Self { weight, bias })
    }

    /// Each input pixel expands into an independent `stride` x `stride` block,
    /// so the layer is a single matrix product plus a reshuffle.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (_, o, s, _) = self.weight.dims4()?;
        let flat = x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?;
        let y = flat.matmul(&self.weight.as_tensor().reshape((c, o * s * s))?)?;
        let y = y.reshape((n, h, w, o, s, s))?.permute((0, 3, 1, 4, 2, 5))?.reshape((n, o, h * s, w * s))?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
        None => Ok(y),
    }
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f.max(1) as f64).sqrt();
        let weight = store.param(format!("{name}.weight"), &[out_f, in_f], Init::Uniform(bound), rng)?;
        let bias = store.param(format!("{name}.bias"), &[out_f], Init::Uniform(bound), rng)?;
        Ok(Self { weight, bias })
    }

    /// `x`: (N, in) -> (N, out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(format!("{name}.weight"), &[channels], Init::Const(1.0), rng)?,
            beta: store.param(format!("{name}.bias"), &[channels], Init::Const(0.0), rng)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[channels], 0.0, rng)?,
            running_var: store.buffer(format!("{name}.running_var"), &[channels], 1.0, rng)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let m = self.momentum;
            let new_mean = (self.running_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()?.detach() * m)?;
            let new_var = (self.running_var.as_tensor() * (1.0 - m))? + (var.flatten_all()?.detach() * m)?;
            self.running_mean.set(&new_mean?)?;
            self.running_var.set(&new_var?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, (), 1, 1))?,
                self.running_var.as_tensor().reshape((1, (), 1, 1))?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// (N, C, H, W) -> (N, C)
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = tensor_from_f32(mask, x.dims(), x.dtype())?;
    Ok((x * mask)?)
}

/// Stochastic gradient descent with momentum and L2 weight decay (PyTorch semantics).
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, n_params: usize) -> Self {
        Self { lr, momentum, weight_decay, velocity: vec![None; n_params] }
    }

    pub fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<()> {
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d = (d + (var.as_tensor() * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                let buf = match &self.velocity[i] {
                    Some(v) => ((v * self.momentum)? + &d)?,
                    None => d.clone(),
                };
                self.velocity[i] = Some(buf.clone());
                d = buf;
            }
            var.set(&(var.as_tensor() - (d * self.lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|t| (format!("{prefix}velocity.{i}"), t.clone())))
            .collect()
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str) {
        for (i, v) in self.velocity.iter_mut().enumerate() {
            *v = tensors.get(&format!("{prefix}velocity.{i}")).cloned();
        }
    }
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    pub fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let m = match &self.m[i] {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match &self.v[i] {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
        Ok(())
    }

    pub fn state(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(format!("{prefix}step"), Tensor::new(&[self.step as f64], &device())?)];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                out.push((format!("{prefix}m.{i}"), m.clone()));
                out.push((format!("{prefix}v.{i}"), v.clone()));
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        self.step = match tensors.get(&format!("{prefix}step")) {
            Some(t) => to_vec_f64(t)?[0] as u64,
            None => 0,
        };
        for i in 0..self.m.len() {
            self.m[i] = tensors.get(&format!("{prefix}m.{i}")).cloned();
            self.v[i] = tensors.get(&format!("{prefix}v.{i}")).cloned();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut store = ParamStore::new(DType::F32);
            Conv2d::new(&mut store, &mut rng_from_seed(seed), "c", 3, 4, 3, ConvCfg::same(3), true).unwrap();
            store.flat_values().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn log_softmax_matches_direct_formula() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 1000.0]], &device()).unwrap();
        let y = to_vec_f64(&log_softmax(&x, 1).unwrap()).unwrap();
        let z = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((y[0] - (1.0 - z)).abs() < 1e-12);
        assert!(y[5].abs() < 1e-12 && y[3] < -999.0);
    }

    #[test]
    fn sigmoid_and_leaky_relu() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &device()).unwrap();
        let s = to_vec_f64(&sigmoid(&x).unwrap()).unwrap();
        assert!((s[0] - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-12);
        assert_eq!(s[1], 0.5);
        assert_eq!(to_vec_f64(&leaky_relu(&x, 0.2).unwrap()).unwrap(), vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let var = Var::new(&[1.0f64, -2.0], &device()).unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.5, 1);
        for _ in 0..2 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&[var.clone()], &grads).unwrap();
        }
        // step 1: d = 2p + 0.5p = 2.5p, buf = d, p' = p - 0.25p = 0.75p
        // step 2: d = 2.5*0.75p, buf = 0.9*2.5p + d, p'' = 0.75p - 0.1*buf
        let p0 = 1.0;
        let p1 = 0.75 * p0;
        let buf = 0.9 * 2.5 * p0 + 2.5 * p1;
        let expected = p1 - 0.1 * buf;
        let got = to_vec_f64(var.as_tensor()).unwrap();
        assert!((got[0] - expected).abs() < 1e-12);
        assert!((got[1] + 2.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let var = Var::new(&[3.0f64], &device()).unwrap();
        let mut opt = Adam::new(0.01, 1);
        let grads = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&[var.clone()], &grads).unwrap();
        assert!((to_vec_f64(var.as_tensor()).unwrap()[0] - 2.99).abs() < 1e-8);
    }

    #[test]
    fn dropout_mask_is_seeded_and_scaled() {
        let x = Tensor::ones((1000,), DType::F32, &device()).unwrap();
        let a = to_vec_f64(&dropout(&x, 0.5, &mut rng_from_seed(3)).unwrap()).unwrap();
        let b = to_vec_f64(&dropout(&x, 0.5, &mut rng_from_seed(3)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = a.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn checkpoint_roundtrip_restores_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(5);
        BatchNorm2d::new(&mut store, &mut rng, "bn", 3).unwrap();
        Linear::new(&mut store, &mut rng, "fc", 3, 2).unwrap();
        let path = dir.path().join("p.safetensors");
        save_tensors(&path, store.named_tensors("m.")).unwrap();

        let mut other = ParamStore::new(DType::F32);
        let mut rng = rng_from_seed(6);
        BatchNorm2d::new(&mut other, &mut rng, "bn", 3).unwrap();
        Linear::new(&mut other, &mut rng, "fc", 3, 2).unwrap();
        assert_ne!(other.flat_values().unwrap(), store.flat_values().unwrap());
        other.load_from(&load_tensors(&path).unwrap(), "m.").unwrap();
        assert_eq!(other.flat_values().unwrap(), store.flat_values().unwrap());
    }
    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
        assert_eq!(a.len(), b.len());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn unfolded_conv_matches_direct_conv_and_finite_differences() {
        let dev = device();
        for (k, cfg) in [
            (3, ConvCfg::same(3)),
            (3, ConvCfg { stride: 2, padding: 1, dilation: 1 }),
            (3, ConvCfg::dilated_same(3, 2)),
            (4, ConvCfg { stride: 2, padding: 1, dilation: 1 }),
            (7, ConvCfg { stride: 2, padding: 3, dilation: 1 }),
            (1, ConvCfg { stride: 1, padding: 0, dilation: 1 }),
        ] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 9, 10), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
            let ours = conv2d_unfold(&x, &w, cfg).unwrap();
            let direct = x.conv2d(&w, cfg.padding, cfg.stride, cfg.dilation, 1).unwrap();
            assert_eq!(ours.dims(), direct.dims());
            assert!(max_abs_diff(&ours, &direct) < 1e-10);

            // Linear probe loss; central differences are exact up to rounding.
            let r = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let loss = |x: &Tensor, w: &Tensor| to_f64(&(conv2d_unfold(x, w, cfg).unwrap() * &r).unwrap().sum_all().unwrap()).unwrap();
            let grads = (ours * &r).unwrap().sum_all().unwrap().backward().unwrap();
            for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
                let g = to_vec_f64(grads.get(var).unwrap()).unwrap();
                let base = to_vec_f64(var.as_tensor()).unwrap();
                for idx in (0..base.len()).step_by(base.len() / 7 + 1) {
                    let eval = |delta: f64| {
                        let mut v = base.clone();
                        v[idx] += delta;
                        let t = Tensor::from_vec(v, var.dims(), &dev).unwrap();
                        if is_x { loss(&t, other) } else { loss(other, &t) }
                    };
                    let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                    assert!((fd - g[idx]).abs() < 1e-6, "k={k} {cfg:?} idx {idx}: {fd} vs {}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn blockwise_transposed_conv_matches_direct() {
        let mut store = ParamStore::new(DType::F64);
        let up = ConvTranspose2d::new(&mut store, &mut rng_from_seed(4), "up", 3, 2, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &device()).unwrap();
        let ours = up.forward(&x).unwrap();
        let direct = add_channel_bias(x.conv_transpose2d(&up.weight, 0, 0, 2, 1).unwrap(), up.bias.as_ref()).unwrap();
        assert_eq!(ours.dims(), &[2, 2, 8, 10]);
        assert!(max_abs_diff(&ours, &direct) < 1e-12);
    }
}

//! Parameter storage and the basic layers shared by backbones and heads.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ops;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with variables detached, so no computation graph is retained.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

fn tracked(t: &Tensor) -> Tensor {
    if GRAD_ENABLED.with(|c| c.get()) {
        t.clone()
    } else {
        t.detach()
    }
}

fn count_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Runs `f`, returning its result and the multiply-accumulates performed by
/// convolutions and dense layers on this thread meanwhile.
pub fn with_mac_counter<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let macs = MAC_COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        MAC_COUNTER.with(|c| c.set(Some(p + macs)));
    }
    (out, macs)
}

/// Named model variables. Buffers (normalization statistics) are saved with
/// the parameters but neither counted nor optimized.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeSet<String>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.iter().filter(|(n, _)| !self.buffers.contains(*n)).map(|(_, v)| v.clone()).collect()
    }

    pub fn trainable_named(&self) -> Vec<(String, Var)> {
        self.vars.iter().filter(|(n, _)| !self.buffers.contains(*n)).map(|(n, v)| (n.clone(), v.clone())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().filter(|(n, _)| !self.buffers.contains(*n)).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

/// Creates variables with seeded initialization.
pub struct ParamBuilder {
    device: Device,
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl ParamBuilder {
    pub fn new(device: &Device, seed: u64) -> Self {
        Self { device: device.clone(), rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::default() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init, buffer: bool) -> candle_core::Result<Tensor> {
        assert!(!self.store.vars.contains_key(&name), "duplicate variable {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Const(v) => vec![v as f32; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| self.rng.sample(d) as f32).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        if buffer {
            self.store.buffers.insert(name.clone());
        }
        self.store.vars.insert(name, var);
        Ok(t)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> candle_core::Result<Tensor> {
        self.create(name.into(), shape, init, false)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> candle_core::Result<Var> {
        let name = name.into();
        self.create(name.clone(), shape, Init::Const(value), true)?;
        Ok(self.store.vars[&name].clone())
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    /// `k × k` convolution with `(k - 1) / 2` padding, He-initialized for the fan-out.
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> candle_core::Result<Self> {
        let fan_out = cout * k * k / groups;
        let weight = pb.param(format!("{name}.weight"), &[cout, cin / groups, k, k], Init::Normal((2.0 / fan_out as f64).sqrt()))?;
        let bias = if bias { Some(pb.param(format!("{name}.bias"), &[cout], Init::Const(0.0))?) } else { None };
        Ok(Self { weight, bias, stride, padding: (k - 1) / 2, groups })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = ops::conv2d(x, &tracked(&self.weight), self.stride, self.padding, self.groups)?;
        let (_, cin_g, kh, kw) = self.weight.dims4()?;
        count_macs((y.elem_count() * cin_g * kh * kw) as u64);
        match &self.bias {
            Some(b) => y.broadcast_add(&tracked(b).reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Uniform initialization in `±1/√fan_in` for weights and bias.
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> candle_core::Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = pb.param(format!("{name}.weight"), &[fan_out, fan_in], Init::Uniform(bound))?;
        let bias = pb.param(format!("{name}.bias"), &[fan_out], Init::Uniform(bound))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (out, inp) = self.weight.dims2()?;
        count_macs((x.dim(0)? * inp * out) as u64);
        x.matmul(&tracked(&self.weight).t()?)?.broadcast_add(&tracked(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> candle_core::Result<Self> {
        Ok(Self {
            weight: pb.param(format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            bias: pb.param(format!("{name}.bias"), &[channels], Init::Const(0.0))?,
            running_mean: pb.buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: pb.buffer(format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics in training mode (updating the running averages),
    /// running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (weight, bias) = (tracked(&self.weight), tracked(&self.bias));
        if !train {
            let scale = (self.running_var.as_tensor().detach().affine(1.0, self.eps)?.sqrt()?.recip()? * &weight)?;
            let shift = (&bias - (self.running_mean.as_tensor().detach() * &scale)?)?;
            return x.broadcast_mul(&scale.reshape(shape)?)?.broadcast_add(&shift.reshape(shape)?);
        }
        {
            // Biased variance: at small inputs the last stages normalize over a
            // few dozen values per channel, and the n/(n-1) factor compounds
            // into a train/eval mismatch.
            let stats = super::ops::batch_channel_stats(x)?;
            let m = self.momentum;
            self.running_mean.set(&(self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + stats.get(0)?.affine(m, 0.0)?)?)?;
            self.running_var.set(&(self.running_var.as_tensor().affine(1.0 - m, 0.0)? + stats.get(1)?.affine(m, 0.0)?)?)?;
        }
        super::ops::batch_norm_train(x, &weight, &bias, self.eps)
    }
}

/// Convolution followed by batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    /// Registers `{conv_name}` and `{bn_name}`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, conv_name: &str, bn_name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> candle_core::Result<Self> {
        Ok(Self { conv: Conv2d::new(pb, conv_name, cin, cout, k, stride, groups, false)?, bn: BatchNorm2d::new(pb, bn_name, cout)? })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.silu()
}

pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    x.upsample_nearest2d(2 * h, 2 * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn batch_norm_normalizes_and_tracks_statistics() {
        let dev = Device::Cpu;
        let mut pb = ParamBuilder::new(&dev, 0);
        let bn = BatchNorm2d::new(&mut pb, "bn", 2).unwrap();
        let store = pb.finish();
        assert_eq!(store.parameter_count(), 4);
        assert_eq!(store.trainable().len(), 2);
        let x = Tensor::arange(0f32, 16.0, &dev).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
        // Channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5.
        let rm = store.get("bn.running_mean").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((rm[0] - 0.55).abs() < 1e-5);
        // Population variance 17.25, blended into the initial 1.
        let rv = store.get("bn.running_var").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((rv[0] - 2.625).abs() < 1e-5);
        let eval = bn.forward(&x, false).unwrap();
        assert_eq!(eval.dims(), x.dims());
    }

    #[test]
    fn mac_counter_counts_conv_and_linear() {
        let dev = Device::Cpu;
        let mut pb = ParamBuilder::new(&dev, 0);
        let conv = Conv2d::new(&mut pb, "c", 3, 4, 3, 1, 1, true).unwrap();
        let fc = Linear::new(&mut pb, "fc", 10, 5).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &dev).unwrap();
        let v = Tensor::zeros((2, 10), DType::F32, &dev).unwrap();
        let (_, macs) = with_mac_counter(|| {
            conv.forward(&x).unwrap();
            fc.forward(&v).unwrap();
        });
        assert_eq!(macs, 4 * 64 * 27 + 2 * 50);
        // Outside a counting scope nothing accumulates.
        conv.forward(&x).unwrap();
    }

    #[test]
    fn seeded_initialization_is_reproducible() {
        let dev = Device::Cpu;
        let build = |seed| {
            let mut pb = ParamBuilder::new(&dev, seed);
            Conv2d::new(&mut pb, "c", 3, 4, 3, 1, 1, false).unwrap().weight.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }
}

//! Parameter storage and the small set of layers the networks are built from.

use std::collections::BTreeMap;

use candle::{DType, Device, Module, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Named trainable parameters, ordered by name.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars
            .iter()
            .filter(move |(name, _)| name.split('.').next() == Some(prefix))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub(crate) fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    /// Snapshot of every parameter value, detached from the variables.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }
}

/// Deterministic initializer writing into a [`ParamStore`] under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        Init {
            prefix: format!("{}.{}", self.prefix, name),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    fn make(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.store.insert(format!("{}.{}", self.prefix, name), var);
        Ok(tensor)
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.make(name, shape, values)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.make(name, shape, vec![value; n])
    }

    pub fn conv(&mut self, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Conv> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = self.uniform("weight", &[c_out, c_in, kernel, kernel], bound)?;
        let bias = self.uniform("bias", &[c_out], bound)?;
        Ok(Conv::new(weight, bias, kernel, stride))
    }

    /// 1x1 convolution with weight and bias both zero.
    pub fn zero_conv(&mut self, c_in: usize, c_out: usize) -> Result<Conv> {
        let weight = self.constant("weight", &[c_out, c_in, 1, 1], 0.0)?;
        let bias = self.constant("bias", &[c_out], 0.0)?;
        Ok(Conv::new(weight, bias, 1, 1))
    }

    pub fn linear(&mut self, d_in: usize, d_out: usize) -> Result<candle_nn::Linear> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = self.uniform("weight", &[d_out, d_in], bound)?;
        let bias = self.uniform("bias", &[d_out], bound)?;
        Ok(candle_nn::Linear::new(weight, Some(bias)))
    }

    pub fn group_norm(&mut self, channels: usize, max_groups: usize) -> Result<candle_nn::GroupNorm> {
        let groups = num_groups(channels, max_groups);
        let weight = self.constant("weight", &[channels], 1.0)?;
        let bias = self.constant("bias", &[channels], 0.0)?;
        Ok(candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?)
    }

    pub fn vector(&mut self, name: &str, len: usize, std: f64) -> Result<Tensor> {
        self.uniform(name, &[len], std * 3f64.sqrt())
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn num_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct Conv {
    inner: candle_nn::Conv2d,
}

impl Conv {
    fn new(weight: Tensor, bias: Tensor, kernel: usize, stride: usize) -> Self {
        let cfg = candle_nn::Conv2dConfig {
            padding: kernel / 2,
            stride,
            ..Default::default()
        };
        Self {
            inner: candle_nn::Conv2d::new(weight, Some(bias), cfg),
        }
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle::Result<Tensor> {
        self.inner.forward(x)
    }
}

/// Pre-activation residual block, optionally modulated by an embedding vector.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv,
    emb_proj: Option<candle_nn::Linear>,
    norm2: candle_nn::GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, emb_dim: Option<usize>, groups: usize) -> Result<Self> {
        let norm1 = init.pp("norm1").group_norm(c_in, groups)?;
        let conv1 = init.pp("conv1").conv(c_in, c_out, 3, 1)?;
        let emb_proj = match emb_dim {
            Some(d) => Some(init.pp("emb_proj").linear(d, c_out)?),
            None => None,
        };
        let norm2 = init.pp("norm2").group_norm(c_out, groups)?;
        let conv2 = init.pp("conv2").conv(c_out, c_out, 3, 1)?;
        let skip = if c_in != c_out {
            Some(init.pp("skip").conv(c_in, c_out, 1, 1)?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            conv1,
            emb_proj,
            norm2,
            conv2,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> candle::Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb) {
            let e = proj.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&e)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

/// Sinusoidal features of (possibly fractional) timesteps, shape `[B, dim]`.
pub fn timestep_features(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            values.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(values, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

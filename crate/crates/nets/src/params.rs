//! Seeded parameter creation and the small layers built on it.
//!
//! Weights are drawn from a ChaCha stream rather than candle's own RNG so
//! that a seed fully determines a network.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with the given fan-in.
    He(usize),
    Normal(f64),
}

/// Owns every trainable variable of one network, keyed by dotted name.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::He(fan_in) => self.normal(n, (2.0 / fan_in.max(1) as f64).sqrt()),
            Init::Normal(std) => self.normal(n, std),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        if self.vars.insert(name.to_string(), v).is_some() {
            return Err(crate::Error::param("name", format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Scoped view that prefixes names with `prefix.`.
    pub fn scope<'a>(&'a mut self, prefix: &str) -> Scope<'a> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}.{name}", self.prefix);
        self.store.var(&full, shape, init)
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            prefix: format!("{}.{prefix}", self.prefix),
            store: &mut *self.store,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// 2D convolution with `same` padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv {
    inner: candle_nn::Conv2d,
}

impl Conv {
    pub fn new(p: &mut Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(p, c_in, c_out, kernel, stride, Init::He(c_in * kernel * kernel))
    }

    pub fn with_init(
        p: &mut Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let w = p.var("weight", &[c_out, c_in, kernel, kernel], init)?;
        let b = p.var("bias", &[c_out], Init::Zeros)?;
        let cfg = candle_nn::Conv2dConfig {
            padding: kernel / 2,
            stride,
            ..Default::default()
        };
        Ok(Self {
            inner: candle_nn::Conv2d::new(w, Some(b), cfg),
        })
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(x)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    inner: candle_nn::Linear,
}

impl Dense {
    pub fn new(p: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(p, d_in, d_out, Init::He(d_in))
    }

    pub fn with_init(p: &mut Scope, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let w = p.var("weight", &[d_out, d_in], init)?;
        let b = p.var("bias", &[d_out], Init::Zeros)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn bias(&self) -> &Tensor {
        self.inner.bias().expect("dense layers carry a bias")
    }
}

impl Module for Dense {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(x)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    inner: candle_nn::GroupNorm,
}

impl Norm {
    pub fn new(p: &mut Scope, channels: usize) -> Result<Self> {
        let groups = [4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1);
        let w = p.var("weight", &[channels], Init::Ones)?;
        let b = p.var("bias", &[channels], Init::Zeros)?;
        Ok(Self {
            inner: candle_nn::GroupNorm::new(w, b, channels, groups, 1e-5)?,
        })
    }
}

impl Module for Norm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(x)
    }
}

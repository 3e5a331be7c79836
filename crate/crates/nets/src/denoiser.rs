//! Per-modality noise predictor: a convolutional encoder-decoder with skip
//! connections whose bottleneck is concatenated with the latents of `n - 1`
//! conditional encoders and fused through a timestep-aware CBAM.

use candle_core::{DType, Device, Module, Tensor};
use pairdiff_core::embedding::embed_timestep;
use serde::{Deserialize, Serialize};

use crate::cbam::{GateInit, TimestepCbam};
use crate::filter::ControlledFilter;
use crate::params::{Conv, Dense, Init, Norm, ParamStore, Scope};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub modality_count: usize,
    pub image_size: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            modality_count: 3,
            image_size: 32,
            embed_dim: pairdiff_core::embedding::DEFAULT_EMBED_DIM,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::param("base_channels", "must be positive"));
        }
        if self.modality_count < 1 {
            return Err(Error::param("modality_count", "must be positive"));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 == 1 {
            return Err(Error::param("embed_dim", "must be even and positive"));
        }
        let scale = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % scale != 0 {
            return Err(Error::param(
                "image_size",
                format!("{} is not divisible by 2^depth = {scale}", self.image_size),
            ));
        }
        Ok(())
    }

    /// Channels at resolution level `i` (0 = full size, `depth` = bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1 << level.min(2))
    }
}

/// Whether conditional latents reach the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    Coupled,
    /// Conditional latents replaced by zeros; each network sees only its
    /// own modality.
    Severed,
}

/// `(B, E)` sinusoidal embeddings for per-sample steps.
pub fn embedding_tensor(ts: &[usize], dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        v.extend(embed_timestep(t, dim)?.values);
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), dev)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(p: &mut Scope, c_in: usize, c_out: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(&mut p.scope("norm1"), c_in)?,
            conv1: Conv::new(&mut p.scope("conv1"), c_in, c_out, 3, 1)?,
            temb: Dense::new(&mut p.scope("temb"), temb_dim, c_out)?,
            norm2: Norm::new(&mut p.scope("norm2"), c_out)?,
            conv2: Conv::with_init(&mut p.scope("conv2"), c_out, c_out, 3, 1, Init::He(c_out * 9 * 4))?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv::new(&mut p.scope("skip"), c_in, c_out, 1, 1)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let h = h.broadcast_add(&self.temb.forward(temb)?.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

/// Shallow strided encoder for one filtered conditional modality.
#[derive(Debug, Clone)]
struct CondEncoder {
    filter: ControlledFilter,
    conv_in: Conv,
    downs: Vec<Conv>,
}

impl CondEncoder {
    fn new(p: &mut Scope, cfg: &DenoiserConfig) -> Result<Self> {
        let downs = (0..cfg.depth)
            .map(|i| Conv::new(&mut p.scope(&format!("down{i}")), cfg.channels(i), cfg.channels(i + 1), 3, 2))
            .collect::<Result<_>>()?;
        Ok(Self {
            filter: ControlledFilter::new(&mut p.scope("filter"), cfg.embed_dim)?,
            conv_in: Conv::new(&mut p.scope("conv_in"), 1, cfg.channels(0), 3, 1)?,
            downs,
        })
    }

    fn forward(&self, c: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let f = self.filter.forward(c, emb)?;
        let mut h = self.conv_in.forward(&f)?.silu()?;
        for d in &self.downs {
            h = d.forward(&h)?.silu()?;
        }
        Ok(h)
    }
}

#[derive(Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    store: ParamStore,
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    enc: Vec<ResBlock>,
    downs: Vec<Conv>,
    conds: Vec<CondEncoder>,
    cbam: TimestepCbam,
    fuse: Conv,
    mid: ResBlock,
    ups: Vec<Conv>,
    dec: Vec<ResBlock>,
    norm_out: Norm,
    conv_out: Conv,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_gates(cfg, seed, dtype, GateInit::Random)
    }

    pub fn with_gates(cfg: &DenoiserConfig, seed: u64, dtype: DType, gates: GateInit) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let mut p = store.scope("net");
        let e = cfg.embed_dim;
        let bottleneck = cfg.channels(cfg.depth);
        let n = cfg.modality_count;
        let time1 = Dense::new(&mut p.scope("time1"), e, e)?;
        let time2 = Dense::new(&mut p.scope("time2"), e, e)?;
        let conv_in = Conv::new(&mut p.scope("conv_in"), 1, cfg.channels(0), 3, 1)?;
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for i in 0..cfg.depth {
            let (c, c_next) = (cfg.channels(i), cfg.channels(i + 1));
            enc.push(ResBlock::new(&mut p.scope(&format!("enc{i}")), c, c, e)?);
            downs.push(Conv::new(&mut p.scope(&format!("down{i}")), c, c_next, 3, 2)?);
            ups.push(Conv::new(&mut p.scope(&format!("up{i}")), c_next, c, 3, 1)?);
            dec.push(ResBlock::new(&mut p.scope(&format!("dec{i}")), 2 * c, c, e)?);
        }
        let conds = (0..n.saturating_sub(1))
            .map(|j| CondEncoder::new(&mut p.scope(&format!("cond{j}")), cfg))
            .collect::<Result<_>>()?;
        let cbam = TimestepCbam::new(&mut p.scope("cbam"), n * bottleneck, e, gates)?;
        let fuse = Conv::new(&mut p.scope("fuse"), n * bottleneck, bottleneck, 1, 1)?;
        let mid = ResBlock::new(&mut p.scope("mid"), bottleneck, bottleneck, e)?;
        let norm_out = Norm::new(&mut p.scope("norm_out"), cfg.channels(0))?;
        let conv_out = Conv::with_init(&mut p.scope("conv_out"), cfg.channels(0), 1, 3, 1, Init::Normal(0.01))?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            time1,
            time2,
            conv_in,
            enc,
            downs,
            conds,
            cbam,
            fuse,
            mid,
            ups,
            dec,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Filters of the conditional paths, in condition order.
    pub fn filters(&self) -> impl Iterator<Item = &ControlledFilter> {
        self.conds.iter().map(|c| &c.filter)
    }

    pub fn cbam(&self) -> &TimestepCbam {
        &self.cbam
    }

    pub fn filtered_condition(&self, j: usize, c: &Tensor, emb: &Tensor) -> Result<Tensor> {
        self.conds
            .get(j)
            .ok_or_else(|| Error::param("condition", format!("no conditional path {j}")))?
            .filter
            .forward(c, emb)
    }

    /// Noise prediction for `x_t` of shape `(B, 1, H, W)` with `n - 1`
    /// condition batches of the same shape and `(B, E)` embeddings.
    pub fn forward(&self, x_t: &Tensor, conditions: &[Tensor], emb: &Tensor, mode: Conditioning) -> Result<Tensor> {
        let expected = self.conds.len();
        if conditions.len() != expected {
            return Err(Error::Arity {
                what: "conditions",
                expected,
                actual: conditions.len(),
            });
        }
        let (_, _, h, w) = x_t.dims4()?;
        let scale = 1usize << self.cfg.depth;
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::param("x_t", format!("{h}x{w} is not divisible by {scale}")));
        }
        for c in conditions {
            if c.dims() != x_t.dims() {
                return Err(Error::param("conditions", format!("shape {:?} differs from {:?}", c.dims(), x_t.dims())));
            }
        }
        let temb = self.time2.forward(&self.time1.forward(emb)?.silu()?)?;

        let mut hcur = self.conv_in.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (block, down) in self.enc.iter().zip(&self.downs) {
            hcur = block.forward(&hcur, &temb)?;
            skips.push(hcur.clone());
            hcur = down.forward(&hcur)?;
        }

        let mut latents = vec![hcur.clone()];
        for (enc, c) in self.conds.iter().zip(conditions) {
            latents.push(match mode {
                Conditioning::Coupled => enc.forward(c, emb)?,
                Conditioning::Severed => hcur.zeros_like()?,
            });
        }
        let z = if latents.len() == 1 {
            hcur
        } else {
            Tensor::cat(&latents, 1)?
        };
        let z = self.cbam.forward(&z, emb)?;
        let mut hcur = self.mid.forward(&self.fuse.forward(&z)?, &temb)?;

        for i in (0..self.cfg.depth).rev() {
            let (_, _, hh, ww) = hcur.dims4()?;
            hcur = self.ups[i].forward(&hcur.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            hcur = self.dec[i].forward(&Tensor::cat(&[&hcur, &skips[i]], 1)?, &temb)?;
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?)
    }
}

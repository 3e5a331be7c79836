use candle_core::{Module, Tensor, D};

use crate::params::{Conv, Dense, Init, Scope};
use crate::{Error, Result};

const SPATIAL_KERNEL: usize = 3;

/// Channel then spatial attention whose channel gate also sees the
/// timestep embedding, so the weight given to each (conditional) feature
/// group can change over the reverse process.
#[derive(Debug, Clone)]
pub struct TimestepCbam {
    channels: usize,
    embed_dim: usize,
    fc1: Dense,
    fc2: Dense,
    spatial: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateInit {
    Random,
    /// Zero gate logits: every gate starts at exactly 0.5.
    Zero,
}

impl TimestepCbam {
    pub fn new(p: &mut Scope, channels: usize, embed_dim: usize, init: GateInit) -> Result<Self> {
        let hidden = (channels / 2).max(4);
        let last = match init {
            GateInit::Random => Init::Normal(0.1),
            GateInit::Zero => Init::Zeros,
        };
        let spatial_init = match init {
            GateInit::Random => Init::He(2 * SPATIAL_KERNEL * SPATIAL_KERNEL),
            GateInit::Zero => Init::Zeros,
        };
        Ok(Self {
            channels,
            embed_dim,
            fc1: Dense::new(&mut p.scope("fc1"), 2 * channels + embed_dim, hidden)?,
            fc2: Dense::with_init(&mut p.scope("fc2"), hidden, channels, last)?,
            spatial: Conv::with_init(&mut p.scope("spatial"), 2, 1, SPATIAL_KERNEL, 1, spatial_init)?,
        })
    }

    fn check(&self, x: &Tensor, t_embed: &Tensor) -> Result<(usize, usize)> {
        let (b, c, _, _) = x.dims4()?;
        let (bt, e) = t_embed.dims2()?;
        if c != self.channels {
            return Err(Error::Arity {
                what: "feature channels",
                expected: self.channels,
                actual: c,
            });
        }
        if e != self.embed_dim || bt != b {
            return Err(Error::param(
                "t_embed",
                format!("expected ({b}, {}), got ({bt}, {e})", self.embed_dim),
            ));
        }
        Ok((b, c))
    }

    /// Channel gate `(B, C, 1, 1)` and spatial gate `(B, 1, H, W)`.
    pub fn gates(&self, x: &Tensor, t_embed: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c) = self.check(x, t_embed)?;
        let avg = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let max = x.max(D::Minus1)?.max(D::Minus1)?;
        let pooled = Tensor::cat(&[&avg, &max, t_embed], 1)?;
        let h = self.fc1.forward(&pooled)?.silu()?;
        let channel = candle_nn::ops::sigmoid(&self.fc2.forward(&h)?)?.reshape((b, c, 1, 1))?;
        let maps = Tensor::cat(&[&x.mean_keepdim(1)?, &x.max_keepdim(1)?], 1)?;
        let spatial = candle_nn::ops::sigmoid(&self.spatial.forward(&maps)?)?;
        Ok((channel, spatial))
    }

    pub fn forward(&self, x: &Tensor, t_embed: &Tensor) -> Result<Tensor> {
        let (channel, spatial) = self.gates(x, t_embed)?;
        Ok(x.broadcast_mul(&channel)?.broadcast_mul(&spatial)?)
    }
}

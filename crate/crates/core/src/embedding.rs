use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 64;

/// Sinusoidal features of a step index: `dim / 2` sines followed by
/// `dim / 2` cosines at frequencies spaced geometrically from 1 to 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepEmbedding {
    pub values: Vec<f64>,
}

impl TimestepEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn embed_timestep(t: usize, dim: usize) -> Result<TimestepEmbedding> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param("dim", format!("{dim} must be even and positive")));
    }
    let half = dim / 2;
    let t = t as f64;
    let freq = |k: usize| {
        if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(k as f64) / (half - 1) as f64)
        }
    };
    let mut values = Vec::with_capacity(dim);
    values.extend((0..half).map(|k| (t * freq(k)).sin()));
    values.extend((0..half).map(|k| (t * freq(k)).cos()));
    Ok(TimestepEmbedding { values })
}

//! Differentiable version of the two-parameter low-pass used on every
//! conditional input. The 2D DFT is written as products with real cosine
//! and sine matrices so gradients reach the controller through the mask.

use candle_core::{DType, Device, Module, Tensor};
use pairdiff_core::spectral::{radius_grid, FilterController};

use crate::params::{Dense, Init, Scope};
use crate::Result;

pub const CONTROLLER_HIDDEN: usize = 16;

fn dft_tables(n: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    let angle = |u: usize, m: usize| 2.0 * std::f64::consts::PI * ((u * m) % n) as f64 / n as f64;
    let cos: Vec<f64> = (0..n * n).map(|i| angle(i / n, i % n).cos()).collect();
    let sin: Vec<f64> = (0..n * n).map(|i| angle(i / n, i % n).sin()).collect();
    Ok((
        Tensor::from_vec(cos, (n, n), dev)?.to_dtype(dtype)?,
        Tensor::from_vec(sin, (n, n), dev)?.to_dtype(dtype)?,
    ))
}

/// Multiplies the spectrum of each `(B, 1, H, W)` image by a per-sample
/// real gain map `(B, 1, H, W)` laid out on the unshifted DFT grid.
pub fn spectral_multiply(x: &Tensor, gains: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (dtype, dev) = (x.dtype(), x.device());
    let (ch, sh) = dft_tables(h, dtype, dev)?;
    let (cw, sw) = if h == w { (ch.clone(), sh.clone()) } else { dft_tables(w, dtype, dev)? };
    let left = |m: &Tensor, t: &Tensor| m.broadcast_matmul(t);
    let right = |t: &Tensor, m: &Tensor| t.broadcast_matmul(m);
    // forward: X^ = (C - iS) x (C - iS)
    let cx = left(&ch, x)?;
    let sx = left(&sh, x)?;
    let re = (right(&cx, &cw)? - right(&sx, &sw)?)?;
    let im = (right(&sx, &cw)? + right(&cx, &sw)?)?.neg()?;
    let zr = (re * gains)?;
    let zi = (im * gains)?;
    // inverse: Re[(C + iS) Z (C + iS)] / HW
    let ar = (left(&ch, &zr)? - left(&sh, &zi)?)?;
    let ai = (left(&ch, &zi)? + left(&sh, &zr)?)?;
    let out = (right(&ar, &cw)? - right(&ai, &sw)?)?;
    Ok(out.affine(1.0 / (h * w) as f64, 0.0)?)
}

/// Gains `floor + (1 - floor) exp(-(r / (cutoff r_max + eps))^2)` for
/// per-sample parameters of shape `(B, 1, 1, 1)`.
pub fn lowpass_gains(cutoff: &Tensor, floor: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let grid = radius_grid(h, w);
    let r_max = grid.iter().cloned().fold(0.0, f64::max);
    let r = Tensor::from_vec(grid.iter().copied().collect::<Vec<f64>>(), (1, 1, h, w), cutoff.device())?
        .to_dtype(cutoff.dtype())?;
    let denom = cutoff.affine(r_max, 1e-6)?;
    let g = r.broadcast_div(&denom)?.sqr()?.neg()?.exp()?;
    let one_minus = floor.affine(-1.0, 1.0)?;
    Ok(g.broadcast_mul(&one_minus)?.broadcast_add(floor)?)
}

/// Timestep-controlled filter: a two-layer perceptron emits
/// `(cutoff, floor)` per sample, and the resulting mask is applied in the
/// frequency domain.
#[derive(Debug, Clone)]
pub struct ControlledFilter {
    fc1: Dense,
    fc2: Dense,
}

impl ControlledFilter {
    pub fn new(p: &mut Scope, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Dense::new(&mut p.scope("fc1"), embed_dim, CONTROLLER_HIDDEN)?,
            fc2: Dense::with_init(&mut p.scope("fc2"), CONTROLLER_HIDDEN, 2, Init::Normal(0.01))?,
        })
    }

    /// `(B, 2)` parameters in `(0, 1)` from `(B, E)` sinusoidal embeddings.
    pub fn params(&self, embedding: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(embedding)?.silu()?;
        Ok(candle_nn::ops::sigmoid(&self.fc2.forward(&h)?)?)
    }

    pub fn forward(&self, x: &Tensor, embedding: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let p = self.params(embedding)?;
        let cutoff = p.narrow(1, 0, 1)?.reshape((b, 1, 1, 1))?;
        let floor = p.narrow(1, 1, 1)?.reshape((b, 1, 1, 1))?;
        spectral_multiply(x, &lowpass_gains(&cutoff, &floor, h, w)?)
    }

    /// Copies the weights into the ndarray controller used for inspection.
    pub fn to_core(&self) -> Result<FilterController> {
        let mat = |t: &Tensor| -> Result<ndarray::Array2<f64>> {
            let (r, c) = t.dims2()?;
            let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            Ok(ndarray::Array2::from_shape_vec((r, c), v).expect("dims2 shape"))
        };
        let vec = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        let b2 = vec(self.fc2.bias())?;
        Ok(FilterController {
            w1: mat(self.fc1.weight())?,
            b1: vec(self.fc1.bias())?,
            w2: mat(self.fc2.weight())?,
            b2: [b2[0], b2[1]],
        })
    }
}

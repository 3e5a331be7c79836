use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Anything that maps `(B, 1, H, W)` images to a list of feature maps.
pub trait FeaturePyramid {
    fn pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorMode {
    FixedRandom { seed: u64 },
    Pretrained,
}

#[derive(Debug, Clone)]
struct Layer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

/// Frozen conv pyramid with outputs at strides 1, 2 and 4.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    mode: ExtractorMode,
}

const WIDTHS: [usize; 3] = [8, 16, 32];
const STRIDES: [usize; 3] = [1, 2, 2];

impl FeatureExtractor {
    pub fn seeded(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 1;
        let mut layers = Vec::new();
        for (&c_out, &stride) in WIDTHS.iter().zip(&STRIDES) {
            let fan_in = c_in * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w: Vec<f64> = (0..c_out * fan_in).map(|_| dist.sample(&mut rng)).collect();
            layers.push(Layer {
                weight: Tensor::from_vec(w, (c_out, c_in, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
                bias: Tensor::zeros(c_out, dtype, &Device::Cpu)?,
                stride,
            });
            c_in = c_out;
        }
        Ok(Self {
            layers,
            mode: ExtractorMode::FixedRandom { seed },
        })
    }

    /// Wraps externally trained `(weight, bias, stride)` conv layers.
    pub fn from_layers(layers: Vec<(Tensor, Tensor, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("layers", "need at least one layer"));
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|(weight, bias, stride)| Layer { weight, bias, stride })
                .collect(),
            mode: ExtractorMode::Pretrained,
        })
    }

    pub fn mode(&self) -> ExtractorMode {
        self.mode
    }
}

impl FeaturePyramid for FeatureExtractor {
    fn pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (c, _, _, _) = l.weight.dims4()?;
            h = h
                .conv2d(&l.weight, 1, l.stride, 1, 1)?
                .broadcast_add(&l.bias.reshape((1, c, 1, 1))?)?
                .relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Feature distance between modality estimates, averaged over all `n^2`
/// ordered pairs (the diagonal contributes zero) and over pyramid levels.
/// Equivalent to `2 / n^2` times the sum over unordered pairs, which keeps
/// the value unchanged when every modality is duplicated.
pub fn perceptual_loss(x0_hats: &[Tensor], extractor: &dyn FeaturePyramid) -> Result<Tensor> {
    let n = x0_hats.len();
    if n < 2 {
        return Err(Error::Arity {
            what: "modalities for the perceptual loss",
            expected: 2,
            actual: n,
        });
    }
    let feats = x0_hats
        .iter()
        .map(|x| extractor.pyramid(x))
        .collect::<Result<Vec<_>>>()?;
    let levels = feats[0].len();
    let mut terms = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            for l in 0..levels {
                terms.push((&feats[j][l] - &feats[k][l])?.sqr()?.mean_all()?);
            }
        }
    }
    let sum = Tensor::stack(&terms, 0)?.sum_all()?;
    Ok(sum.affine(2.0 / (n * n * levels) as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(v, (2, 1, 16, 16), &Device::Cpu).unwrap()
    }

    fn value(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    /// Direct enumeration of every ordered pair, diagonal included.
    fn brute(x: &[Tensor], fx: &FeatureExtractor) -> f64 {
        let n = x.len();
        let mut acc = 0.0;
        for a in x {
            for b in x {
                let (fa, fb) = (fx.pyramid(a).unwrap(), fx.pyramid(b).unwrap());
                let per: f64 = fa
                    .iter()
                    .zip(&fb)
                    .map(|(p, q)| value((p - q).unwrap().sqr().unwrap().mean_all().unwrap()))
                    .sum();
                acc += per / fa.len() as f64;
            }
        }
        acc / (n * n) as f64
    }

    #[test]
    fn pyramid_strides() {
        let fx = FeatureExtractor::seeded(0, DType::F64).unwrap();
        let dims: Vec<_> = fx.pyramid(&img(0)).unwrap().iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4]]);
    }

    #[test]
    fn identical_inputs_cost_nothing() {
        let fx = FeatureExtractor::seeded(0, DType::F64).unwrap();
        let a = img(1);
        assert_eq!(value(perceptual_loss(&[a.clone(), a.clone(), a], &fx).unwrap()), 0.0);
    }

    #[test]
    fn duplication_and_permutation_invariance() {
        let fx = FeatureExtractor::seeded(3, DType::F64).unwrap();
        let (a, b, c) = (img(1), img(2), img(3));
        let two = value(perceptual_loss(&[a.clone(), b.clone()], &fx).unwrap());
        let four = value(perceptual_loss(&[a.clone(), a.clone(), b.clone(), b.clone()], &fx).unwrap());
        assert!((two - four).abs() < 1e-12 * two.max(1.0));
        assert!((two - brute(&[a.clone(), b.clone()], &fx)).abs() < 1e-12);
        let abc = value(perceptual_loss(&[a.clone(), b.clone(), c.clone()], &fx).unwrap());
        let cab = value(perceptual_loss(&[c.clone(), a.clone(), b.clone()], &fx).unwrap());
        assert!((abc - cab).abs() < 1e-12);
        assert!((abc - brute(&[a, b, c], &fx)).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_is_positive() {
        let fx = FeatureExtractor::seeded(1, DType::F64).unwrap();
        let a = img(5);
        let b = a.affine(1.0, 0.3).unwrap();
        assert!(value(perceptual_loss(&[a, b], &fx).unwrap()) > 0.0);
    }

    #[test]
    fn needs_two_inputs() {
        let fx = FeatureExtractor::seeded(1, DType::F64).unwrap();
        assert!(matches!(perceptual_loss(&[img(0)], &fx), Err(Error::Arity { .. })));
    }
}

//! Frequency-domain conditioning filters.
//!
//! The parametric low-pass is described by two scalars in `[0, 1]`:
//!
//! ```text
//! M(r) = floor + (1 - floor) * exp(-(r / (cutoff * r_max + 1e-6))^2)
//! ```
//!
//! where `r` is the radial frequency of a DFT bin in cycles per pixel and
//! `r_max` the largest radius on the grid, so the same parameters apply to
//! any image size. [`StaticFreqMask`] is the size-locked per-bin baseline.

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::embedding::TimestepEmbedding;
use crate::{Error, Image, Result};

const CUTOFF_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub cutoff: f64,
    pub floor: f64,
}

impl FilterParams {
    pub fn new(cutoff: f64, floor: f64) -> Result<Self> {
        let p = Self { cutoff, floor };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::param("cutoff", format!("{} not in [0, 1]", self.cutoff)));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::param("floor", format!("{} not in [0, 1]", self.floor)));
        }
        Ok(())
    }

    /// Learnable state of the parametric filter, independent of image size.
    pub const fn param_count() -> usize {
        2
    }
}

/// Signed DFT bin frequency in cycles per sample, numpy `fftfreq` layout.
pub fn bin_frequency(index: usize, n: usize) -> f64 {
    let k = if index <= (n - 1) / 2 {
        index as f64
    } else {
        index as f64 - n as f64
    };
    k / n as f64
}

/// Radial frequency of every bin in unshifted DFT layout.
pub fn radius_grid(height: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((height, width), |(u, v)| {
        let fy = bin_frequency(u, height);
        let fx = bin_frequency(v, width);
        (fy * fy + fx * fx).sqrt()
    })
}

pub fn gain_at(r: f64, r_max: f64, params: FilterParams) -> f64 {
    let scale = params.cutoff * r_max + CUTOFF_EPS;
    let q = r / scale;
    params.floor + (1.0 - params.floor) * (-q * q).exp()
}

/// Gains on the unshifted DFT grid of a `height x width` image.
pub fn build_mask(height: usize, width: usize, params: FilterParams) -> Result<Array2<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::param("shape", format!("{height}x{width} has no bins")));
    }
    params.validate()?;
    let radius = radius_grid(height, width);
    let r_max = radius.fold(0.0f64, |m, &r| m.max(r));
    Ok(radius.mapv(|r| gain_at(r, r_max, params)))
}

fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in data.rows_mut() {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = *v;
        }
        row_fft.process(&mut buf[..w]);
        for (v, b) in row.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
    for mut col in data.columns_mut() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = *v;
        }
        col_fft.process(&mut buf[..h]);
        for (v, b) in col.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        data.mapv_inplace(|c| c * norm);
    }
}

/// Forward DFT, per-bin multiply, inverse DFT, real part.
pub fn spectral_multiply(image: &Image, gains: &Array2<f64>) -> Result<Image> {
    if image.dim() != gains.dim() {
        return Err(Error::shape(gains.shape(), image.shape()));
    }
    let mut spec = image.mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut spec, false);
    ndarray::Zip::from(&mut spec).and(gains).for_each(|c, &g| *c *= g);
    fft2(&mut spec, true);
    Ok(spec.mapv(|c| c.re))
}

/// Squared magnitude spectrum (unnormalized DFT).
pub fn power_spectrum(image: &Image) -> Array2<f64> {
    let mut spec = image.mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut spec, false);
    spec.mapv(|c| c.norm_sqr())
}

fn check_finite(image: &Image) -> Result<()> {
    if let Some(pos) = image.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite pixel at flat index {pos}")));
    }
    Ok(())
}

pub fn apply_lowpass(image: &Image, params: FilterParams) -> Result<Image> {
    check_finite(image)?;
    let (h, w) = image.dim();
    let gains = build_mask(h, w, params)?;
    spectral_multiply(image, &gains)
}

/// Learned per-bin gains over the half spectrum, tied to one image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticFreqMask {
    pub height: usize,
    pub width: usize,
    /// `(channels, height, width / 2 + 1)`.
    pub gains: Array3<f64>,
}

impl StaticFreqMask {
    pub fn ones(channels: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            gains: Array3::ones((channels, height, width / 2 + 1)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gains.len()
    }

    /// Full-grid gains for one channel, filled by Hermitian symmetry so that
    /// bin `(u, v)` and its conjugate partner share a gain.
    pub fn full_gains(&self, channel: usize) -> Array2<f64> {
        let half = self.width / 2;
        Array2::from_shape_fn((self.height, self.width), |(u, v)| {
            if v <= half {
                self.gains[[channel, u, v]]
            } else {
                self.gains[[channel, (self.height - u) % self.height, self.width - v]]
            }
        })
    }
}

pub fn apply_static_mask(image: &Image, mask: &StaticFreqMask) -> Result<Image> {
    apply_static_mask_channel(image, mask, 0)
}

pub fn apply_static_mask_channel(image: &Image, mask: &StaticFreqMask, channel: usize) -> Result<Image> {
    if image.dim() != (mask.height, mask.width) {
        return Err(Error::shape(&[mask.height, mask.width], image.shape()));
    }
    if channel >= mask.gains.dim().0 {
        return Err(Error::param("channel", format!("{channel} >= {}", mask.gains.dim().0)));
    }
    check_finite(image)?;
    spectral_multiply(image, &mask.full_gains(channel))
}

/// Inference-side copy of the two-layer perceptron mapping a timestep
/// embedding to filter parameters: `sigmoid(w2 silu(w1 e + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterController {
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Array2<f64>,
    pub b2: [f64; 2],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FilterController {
    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, embed_dim)),
            b1: vec![0.0; hidden],
            w2: Array2::zeros((2, hidden)),
            b2: [0.0; 2],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 2
    }

    pub fn emit(&self, embedding: &TimestepEmbedding) -> Result<FilterParams> {
        if embedding.dim() != self.input_dim() {
            return Err(Error::shape(&[self.input_dim()], &[embedding.dim()]));
        }
        let e = ndarray::ArrayView1::from(&embedding.values);
        let mut h = self.w1.dot(&e);
        for (v, b) in h.iter_mut().zip(&self.b1) {
            let z = *v + b;
            *v = z * sigmoid(z);
        }
        let o = self.w2.dot(&h);
        Ok(FilterParams {
            cutoff: sigmoid(o[0] + self.b2[0]),
            floor: sigmoid(o[1] + self.b2[1]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::embed_timestep;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.sample(StandardNormal))
    }

    /// O(N^4) DFT used as an independent reference for the FFT path.
    fn naive_dft(re: &Array2<f64>, im: &Array2<f64>, sign: f64) -> (Array2<f64>, Array2<f64>) {
        let (h, w) = re.dim();
        let mut out_re = Array2::zeros((h, w));
        let mut out_im = Array2::zeros((h, w));
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let (s, c) = ang.sin_cos();
                        sr += re[[y, x]] * c - im[[y, x]] * s;
                        si += re[[y, x]] * s + im[[y, x]] * c;
                    }
                }
                out_re[[u, v]] = sr;
                out_im[[u, v]] = si;
            }
        }
        (out_re, out_im)
    }

    fn naive_filter(image: &Image, gains: &Array2<f64>) -> Image {
        let (h, w) = image.dim();
        let (re, im) = naive_dft(image, &Array2::zeros((h, w)), -1.0);
        let (re, im) = (&re * gains, &im * gains);
        let (out, _) = naive_dft(&re, &im, 1.0);
        out / (h * w) as f64
    }

    fn max_abs_diff(a: &Image, b: &Image) -> f64 {
        (a - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v))
    }

    #[test]
    fn floor_one_is_all_pass() {
        for cutoff in [0.0, 0.3, 1.0] {
            let m = build_mask(7, 9, FilterParams::new(cutoff, 1.0).unwrap()).unwrap();
            assert!(m.iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn dc_gain_is_one() {
        for (c, f) in [(0.0, 0.0), (0.5, 0.0), (1.0, 0.3), (0.1, 0.9)] {
            let m = build_mask(16, 16, FilterParams::new(c, f).unwrap()).unwrap();
            assert_eq!(m[[0, 0]], 1.0);
        }
    }

    #[test]
    fn mask_matches_direct_formula() {
        let params = FilterParams::new(0.5, 0.0).unwrap();
        let m = build_mask(8, 8, params).unwrap();
        // frequencies of an 8-point grid: 0, 1/8, 2/8, 3/8, -4/8, -3/8, -2/8, -1/8
        let f: [f64; 8] = [0.0, 0.125, 0.25, 0.375, -0.5, -0.375, -0.25, -0.125];
        let r_max = (0.5f64 * 0.5 * 2.0).sqrt();
        for u in 0..8 {
            for v in 0..8 {
                let r = (f[u] * f[u] + f[v] * f[v]).sqrt();
                let want = (-(r / (0.5 * r_max + 1e-6)).powi(2)).exp();
                assert!((m[[u, v]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn radial_monotonicity() {
        for (c, f) in [(0.2, 0.0), (0.5, 0.4), (0.9, 0.1)] {
            let params = FilterParams::new(c, f).unwrap();
            let m = build_mask(16, 16, params).unwrap();
            let r = radius_grid(16, 16);
            let mut bins: Vec<(f64, f64)> = r.iter().copied().zip(m.iter().copied()).collect();
            bins.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for pair in bins.windows(2) {
                assert!(pair[1].1 <= pair[0].1 + 1e-15);
            }
        }
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = Array2::from_elem((6, 10), 0.37);
        let out = apply_lowpass(&img, FilterParams::new(0.1, 0.0).unwrap()).unwrap();
        assert!(max_abs_diff(&img, &out) < 1e-6);
    }

    #[test]
    fn floor_one_is_identity() {
        let img = noise(12, 9, 1);
        let out = apply_lowpass(&img, FilterParams::new(0.3, 1.0).unwrap()).unwrap();
        assert!(max_abs_diff(&img, &out) < 1e-6);
    }

    #[test]
    fn white_noise_variance_shrinks() {
        let params = FilterParams::new(0.2, 0.0).unwrap();
        for seed in 0..10 {
            let img = noise(32, 32, seed);
            let out = apply_lowpass(&img, params).unwrap();
            let var = |a: &Image| {
                let m = a.mean().unwrap();
                a.mapv(|v| (v - m).powi(2)).mean().unwrap()
            };
            assert!(var(&out) < var(&img));
        }
    }

    #[test]
    fn fft_path_matches_naive_dft() {
        let img = noise(8, 6, 4);
        let gains = build_mask(8, 6, FilterParams::new(0.4, 0.2).unwrap()).unwrap();
        let fast = spectral_multiply(&img, &gains).unwrap();
        assert!(max_abs_diff(&fast, &naive_filter(&img, &gains)) < 1e-10);
    }

    #[test]
    fn nonfinite_input_rejected() {
        let mut img = noise(4, 4, 0);
        img[[1, 2]] = f64::NAN;
        assert!(matches!(
            apply_lowpass(&img, FilterParams::new(0.5, 0.5).unwrap()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn static_mask_identity_and_annihilator() {
        let img = noise(8, 8, 7);
        let ones = StaticFreqMask::ones(1, 8, 8);
        assert!(max_abs_diff(&img, &apply_static_mask(&img, &ones).unwrap()) < 1e-6);
        let mut zeros = ones.clone();
        zeros.gains.fill(0.0);
        let out = apply_static_mask(&img, &zeros).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn static_mask_matches_naive_oracle() {
        let img = noise(8, 8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut mask = StaticFreqMask::ones(1, 8, 8);
        mask.gains.mapv_inplace(|_| rng.random::<f64>());
        let want = naive_filter(&img, &mask.full_gains(0));
        let got = apply_static_mask(&img, &mask).unwrap();
        assert!(max_abs_diff(&want, &got) < 1e-10);
    }

    #[test]
    fn static_mask_is_size_locked() {
        let mask = StaticFreqMask::ones(1, 8, 8);
        assert!(matches!(
            apply_static_mask(&noise(16, 16, 0), &mask),
            Err(Error::Shape { .. })
        ));
        // the parametric filter handles both sizes with the same two scalars
        let p = FilterParams::new(0.3, 0.2).unwrap();
        assert!(apply_lowpass(&noise(8, 8, 0), p).is_ok());
        assert!(apply_lowpass(&noise(16, 16, 0), p).is_ok());
        assert_eq!(FilterParams::param_count(), 2);
        assert_eq!(StaticFreqMask::ones(1, 16, 16).param_count(), 16 * 9);
        assert!(StaticFreqMask::ones(1, 16, 16).param_count() > mask.param_count());
    }

    #[test]
    fn zero_controller_emits_half() {
        let c = FilterController::zeros(16, 8);
        for t in [0, 10, 999] {
            let p = c.emit(&embed_timestep(t, 16).unwrap()).unwrap();
            assert_eq!(p, FilterParams { cutoff: 0.5, floor: 0.5 });
        }
        assert!(matches!(
            c.emit(&embed_timestep(3, 8).unwrap()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn random_controller_is_deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = FilterController::zeros(16, 8);
        c.w1.mapv_inplace(|_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        c.w2.mapv_inplace(|_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        for t in (0..1000).step_by(37) {
            let e = embed_timestep(t, 16).unwrap();
            let p = c.emit(&e).unwrap();
            assert_eq!(p, c.emit(&e).unwrap());
            p.validate().unwrap();
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
        proptest::collection::vec(-2.0f64..2.0, h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    }

    proptest! {
        #[test]
        fn lowpass_is_linear(
            x in image(8, 12),
            y in image(8, 12),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            cutoff in 0.0f64..1.0,
            floor in 0.0f64..1.0,
        ) {
            let p = FilterParams::new(cutoff, floor).unwrap();
            let lhs = apply_lowpass(&(&x * a + &y * b), p).unwrap();
            let rhs = apply_lowpass(&x, p).unwrap() * a + apply_lowpass(&y, p).unwrap() * b;
            let dev = (&lhs - &rhs).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            prop_assert!(dev < 1e-5);
        }

        #[test]
        fn lowpass_contracts_energy(
            x in image(8, 8),
            cutoff in 0.0f64..1.0,
            floor in 0.0f64..0.99,
        ) {
            let p = FilterParams::new(cutoff, floor).unwrap();
            let out = apply_lowpass(&x, p).unwrap();
            let e_in = power_spectrum(&x).sum();
            let e_out = power_spectrum(&out).sum();
            prop_assert!(e_out <= e_in * (1.0 + 1e-12) + 1e-12);
            let dc_only = power_spectrum(&x)[[0, 0]];
            if e_in - dc_only > 1e-6 {
                prop_assert!(e_out < e_in);
            }
        }
    }
}

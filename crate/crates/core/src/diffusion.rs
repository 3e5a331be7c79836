//! Noise schedules, offset-noise corruption and the single-step reverse
//! updates shared by training and sampling.
//!
//! Step indices follow `t = 0` clean, `t = T` fully noised. All images are
//! expected in the model value range `[-1, 1]`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

/// Value range every modality is normalized to before diffusion.
pub const IMAGE_RANGE: (f64, f64) = (-1.0, 1.0);

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_OFFSET_WEIGHT: f64 = 0.1;

/// Serializable description of a schedule; the coefficient tables are
/// rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[0] = 1`, `alpha_bars[t] = prod_{s <= t} alpha_s`.
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleSpec::default()
            .build()
            .expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    /// Linearly interpolated betas, endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} not in (0, 1)"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            spec: ScheduleSpec {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bars()[t]` for `t` in `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.alpha_bars[t])
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn beta_tilde(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        Ok(self.betas[t - 1] * (1.0 - ab_prev) / (1.0 - ab))
    }

    /// Step index nearest to `fraction * T`.
    pub fn step_at_fraction(&self, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::param("seed_fraction", format!("{fraction} not in (0, 1]")));
        }
        Ok(((fraction * self.steps() as f64).round() as usize).clamp(1, self.steps()))
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::Index {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Offset noise `N' = N + C`, with `N` i.i.d. standard normal and `C` a
/// single scaled standard-normal draw shared by every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub values: Image,
    pub offset: f64,
}

impl NoiseField {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Draws `C` first, then the per-pixel field in row-major order.
pub fn sample_offset_noise<R: Rng + ?Sized>(
    shape: (usize, usize),
    offset_weight: f64,
    rng: &mut R,
) -> Result<NoiseField> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::param("shape", format!("{h}x{w} has no pixels")));
    }
    if !(offset_weight >= 0.0) || !offset_weight.is_finite() {
        return Err(Error::param("offset_weight", format!("{offset_weight} must be >= 0")));
    }
    let offset = offset_weight * rng.sample::<f64, _>(StandardNormal);
    let values = Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal) + offset);
    Ok(NoiseField { values, offset })
}

pub fn standard_normal_image<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Image {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Closed-form corruption `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(
    x0: &Image,
    t: usize,
    noise: &NoiseField,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    forward_diffuse_with(x0, t, &noise.values, schedule)
}

/// [`forward_diffuse`] over a raw noise image.
pub fn forward_diffuse_with(
    x0: &Image,
    t: usize,
    noise: &Image,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    check_same_shape(x0, noise)?;
    let ab = schedule.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x0)
        .and(noise)
        .map_collect(|&x, &e| s * x + n * e))
}

/// Inverts the forward process without clamping.
pub fn estimate_x0_raw(
    x_t: &Image,
    eps_pred: &Image,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    check_same_shape(x_t, eps_pred)?;
    if t == 0 {
        return Err(Error::Index {
            t,
            min: 1,
            max: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x_t)
        .and(eps_pred)
        .map_collect(|&x, &e| (x - n * e) / s))
}

/// Clean-image estimate from a noise prediction, clamped to [`IMAGE_RANGE`].
pub fn estimate_x0(
    x_t: &Image,
    eps_pred: &Image,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    let mut x0 = estimate_x0_raw(x_t, eps_pred, t, schedule)?;
    clamp_to_range(&mut x0);
    Ok(x0)
}

pub fn clamp_to_range(img: &mut Image) {
    let (lo, hi) = IMAGE_RANGE;
    img.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    #[default]
    BetaTilde,
}

impl SigmaMode {
    pub fn variance(self, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        match self {
            SigmaMode::Beta => schedule.beta(t),
            SigmaMode::BetaTilde => schedule.beta_tilde(t),
        }
    }
}

/// Ancestral DDPM step from `t` to `t - 1`. The final step (`t = 1`) adds no
/// noise and does not touch the rng.
pub fn posterior_step<R: Rng + ?Sized>(
    x_t: &Image,
    eps_pred: &Image,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    sigma_mode: SigmaMode,
) -> Result<Image> {
    check_same_shape(x_t, eps_pred)?;
    let beta = schedule.beta(t)?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mut out = ndarray::Zip::from(x_t)
        .and(eps_pred)
        .map_collect(|&x, &e| inv_sqrt_alpha * (x - coef * e));
    if t > 1 {
        let sigma = sigma_mode.variance(t, schedule)?.sqrt();
        out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(out)
}

/// Generalized (DDIM-parameterized) step from `t` to `t_prev < t`:
///
/// `x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps + sigma z`
///
/// with `sigma^2 = eta^2 (1 - abar_prev)/(1 - abar_t) (1 - abar_t/abar_prev)`.
/// For `t_prev = t - 1`, `eta = 1` and an unclamped `x0_hat` this is exactly
/// [`posterior_step`] in [`SigmaMode::BetaTilde`]; `eta = 0` is deterministic.
/// `x0_hat` goes through [`estimate_x0`] when `clamp` is set.
#[allow(clippy::too_many_arguments)]
pub fn generalized_step<R: Rng + ?Sized>(
    x_t: &Image,
    eps_pred: &Image,
    t: usize,
    t_prev: usize,
    eta: f64,
    clamp: bool,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Image> {
    if t_prev >= t {
        return Err(Error::param("t_prev", format!("{t_prev} must be below t = {t}")));
    }
    if !(eta >= 0.0) {
        return Err(Error::param("eta", format!("{eta} must be >= 0")));
    }
    let x0 = if clamp {
        estimate_x0(x_t, eps_pred, t, schedule)?
    } else {
        estimate_x0_raw(x_t, eps_pred, t, schedule)?
    };
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let var = if eta > 0.0 && t_prev > 0 {
        eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - var).max(0.0).sqrt();
    let s = ab_prev.sqrt();
    let mut out = ndarray::Zip::from(&x0)
        .and(eps_pred)
        .map_collect(|&x, &e| s * x + dir * e);
    if var > 0.0 {
        let sigma = var.sqrt();
        out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(out)
}

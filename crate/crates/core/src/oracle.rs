//! Closed-form noise predictor for a Gaussian image prior, used to check
//! samplers without any training.
//!
//! With `x0 ~ N(mu, sigma2 I)` and `x_t = sqrt(a) x0 + sqrt(1 - a) eps`, the
//! posterior of `x0` given `x_t` is Gaussian with mean
//!
//! ```text
//! m = (sigma2 sqrt(a) x_t + (1 - a) mu) / (a sigma2 + 1 - a)
//! ```
//!
//! and the MMSE noise estimate is `(x_t - sqrt(a) m) / sqrt(1 - a)`.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::sampler::CoupledEps;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGaussianDenoiser {
    pub mu: Image,
    pub sigma2: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Image, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(Error::param("sigma2", format!("{sigma2} must be >= 0")));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Posterior mean of `x0` at signal level `alpha_bar`.
    pub fn posterior_mean(&self, x_t: &Image, alpha_bar: f64) -> Result<Image> {
        if x_t.dim() != self.mu.dim() {
            return Err(Error::shape(self.mu.shape(), x_t.shape()));
        }
        let sa = alpha_bar.sqrt();
        let denom = alpha_bar * self.sigma2 + 1.0 - alpha_bar;
        Ok(ndarray::Zip::from(x_t)
            .and(&self.mu)
            .map_collect(|&x, &m| (self.sigma2 * sa * x + (1.0 - alpha_bar) * m) / denom))
    }

    pub fn eps(&self, x_t: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image> {
        if t == 0 {
            return Err(Error::Index {
                t,
                min: 1,
                max: schedule.steps(),
            });
        }
        let ab = schedule.alpha_bar(t)?;
        let m = self.posterior_mean(x_t, ab)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(ndarray::Zip::from(x_t).and(&m).map_collect(|&x, &m| (x - sa * m) / sn))
    }
}

pub fn oracle_eps(
    x_t: &Image,
    t: usize,
    oracle: &AnalyticGaussianDenoiser,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    oracle.eps(x_t, t, schedule)
}

/// One independent oracle per modality; conditions are ignored.
#[derive(Debug, Clone)]
pub struct OracleSet {
    pub oracles: Vec<AnalyticGaussianDenoiser>,
    pub schedule: NoiseSchedule,
}

impl CoupledEps for OracleSet {
    fn modality_count(&self) -> usize {
        self.oracles.len()
    }

    fn predict(&self, k: usize, x_t: &[Image], _conditions: &[&[Image]], t: usize) -> Result<Vec<Image>> {
        let oracle = self
            .oracles
            .get(k)
            .ok_or_else(|| Error::param("k", format!("no oracle for modality {k}")))?;
        x_t.iter().map(|x| oracle.eps(x, t, &self.schedule)).collect()
    }
}

//! Procedural anatomy / functional / mask triplets.
//!
//! The anatomy image is a soft elliptical "head" with a bright rim just
//! inside its boundary. The mask is one elliptical blob kept clear of the
//! rim. The functional image is a dim copy of the head silhouette plus a hot
//! blob exactly on the mask support, so thresholding it at half the blob
//! contrast recovers the mask.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Modality, PairedSample, SourceTag};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Head semi-axes as fractions of half the image size.
    pub head_radius: (f64, f64),
    /// Tumour semi-axes in pixels.
    pub tumour_radius: (f64, f64),
    pub head_level: f64,
    pub rim_level: f64,
    /// Functional intensity of the head silhouette.
    pub silhouette_level: f64,
    /// Functional hot-blob contrast above the silhouette.
    pub contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            head_radius: (0.6, 0.85),
            tumour_radius: (2.0, 4.5),
            head_level: 0.35,
            rim_level: 0.9,
            silhouette_level: 0.2,
            contrast: 0.8,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::param("image_size", "phantoms need at least 8x8 pixels"));
        }
        let (lo, hi) = self.head_radius;
        if !(0.0 < lo && lo <= hi && hi <= 0.95) {
            return Err(Error::param("head_radius", format!("({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.95")));
        }
        let (tlo, thi) = self.tumour_radius;
        let min_head = lo * self.image_size as f64 / 2.0;
        if !(0.5 <= tlo && tlo <= thi && thi + 3.0 < min_head) {
            return Err(Error::param(
                "tumour_radius",
                format!("({tlo}, {thi}) must fit inside the smallest head ({min_head:.1} px)"),
            ));
        }
        if !(self.silhouette_level < self.contrast / 2.0) {
            return Err(Error::param("contrast", "silhouette must stay below half the contrast"));
        }
        if self.noise < 0.0 {
            return Err(Error::param("noise", "must be >= 0"));
        }
        Ok(())
    }
}

/// Raw functional threshold separating the hot blob from the silhouette.
pub fn functional_threshold(cfg: &PhantomConfig) -> f64 {
    cfg.contrast / 2.0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius; 1 on the boundary.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Lower bound on the distance to the boundary for interior points.
    fn depth(&self, y: f64, x: f64) -> f64 {
        (1.0 - self.rho(y, x)) * self.rx.min(self.ry)
    }
}

pub fn generate_phantom<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<PairedSample> {
    cfg.validate()?;
    let n = cfg.image_size;
    let half = n as f64 / 2.0;
    let mid = (n as f64 - 1.0) / 2.0;
    let head = Ellipse {
        cy: mid + rng.random_range(-1.5..=1.5),
        cx: mid + rng.random_range(-1.5..=1.5),
        ry: half * rng.random_range(cfg.head_radius.0..=cfg.head_radius.1),
        rx: half * rng.random_range(cfg.head_radius.0..=cfg.head_radius.1),
        angle: rng.random_range(-0.3..=0.3),
    };

    let ta = rng.random_range(cfg.tumour_radius.0..=cfg.tumour_radius.1);
    let tb = rng.random_range(cfg.tumour_radius.0..=cfg.tumour_radius.1);
    // keep the tumour off the skull; small images get a thinner margin
    let reach = ta.max(tb) + (n as f64 / 10.0).min(3.0);
    let mut tumour = None;
    for _ in 0..1000 {
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        if head.depth(cy, cx) >= reach {
            tumour = Some(Ellipse {
                cy,
                cx,
                ry: ta,
                rx: tb,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            });
            break;
        }
    }
    let tumour = tumour.ok_or_else(|| Error::Data("no room for a tumour inside the head".into()))?;

    let mut mask = Array2::zeros((n, n));
    let mut anatomy = Array2::zeros((n, n));
    let mut functional = Array2::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let d = head.depth(fy, fx);
            let inside = head.rho(fy, fx) < 1.0;
            let soft = sigmoid(d / 0.7);
            let rim = (-((d - 1.5) / 1.0).powi(2)).exp();
            let m = if inside && tumour.rho(fy, fx) <= 1.0 { 1.0 } else { 0.0 };
            mask[[y, x]] = m;
            anatomy[[y, x]] = cfg.head_level * soft + (cfg.rim_level - cfg.head_level) * rim * soft;
            functional[[y, x]] = cfg.silhouette_level * soft + cfg.contrast * m;
        }
    }
    for v in anatomy.iter_mut().chain(functional.iter_mut()) {
        let noisy = *v + cfg.noise * rng.sample::<f64, _>(StandardNormal);
        *v = noisy.clamp(0.0, 1.0);
    }

    PairedSample::new(
        "phantom",
        Modality::ALL.to_vec(),
        vec![anatomy, functional, mask],
        SourceTag::Phantom,
    )
}

/// `count` phantoms from one seeded stream, ids `phantom-00000`, ...
pub fn generate_phantoms(cfg: &PhantomConfig, count: usize) -> Result<Vec<PairedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..count)
        .map(|i| {
            let mut s = generate_phantom(cfg, &mut rng)?;
            s.id = format!("phantom-{i:05}");
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::threshold;
    use crate::stats::dice;

    #[test]
    fn seeded_phantoms_repeat() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn thresholded_functional_recovers_mask() {
        let cfg = PhantomConfig::default();
        let level = functional_threshold(&cfg);
        for seed in 0..100 {
            let s = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let hot = threshold(s.get(Modality::Functional).unwrap(), level);
            let d = dice(&hot, s.mask().unwrap()).unwrap();
            assert!(d >= 0.9, "seed {seed}: dice {d}");
        }
    }

    #[test]
    fn mask_stays_inside_head() {
        let cfg = PhantomConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let s = generate_phantom(&cfg, &mut rng).unwrap();
            let mask = s.mask().unwrap();
            assert!(mask.sum() > 0.0);
            let head = threshold(s.get(Modality::Anatomy).unwrap(), 0.15);
            for (m, h) in mask.iter().zip(head.iter()) {
                assert!(!(*m == 1.0 && *h == 0.0));
            }
        }
    }

    #[test]
    fn config_is_validated() {
        let bad = PhantomConfig {
            tumour_radius: (2.0, 20.0),
            ..Default::default()
        };
        assert!(generate_phantom(&bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let bad = PhantomConfig {
            silhouette_level: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ids_are_sequential() {
        let s = generate_phantoms(&PhantomConfig::default(), 3).unwrap();
        let ids: Vec<_> = s.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["phantom-00000", "phantom-00001", "phantom-00002"]);
    }
}

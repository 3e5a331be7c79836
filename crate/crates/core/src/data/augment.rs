use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, PairedSample};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_shift_px: u32,
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift_px: 4,
            max_rotation_deg: 10.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0) {
            return Err(Error::param("max_rotation_deg", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::param("flip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let m = self.max_shift_px as i32;
        let r = self.max_rotation_deg;
        Transform {
            flip: rng.random_bool(self.flip_prob),
            rotation_deg: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            shift: (rng.random_range(-m..=m), rng.random_range(-m..=m)),
        }
    }
}

/// Horizontal flip, then rotation about the image centre, then an integer
/// shift `(dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Transform {
    pub flip: bool,
    pub rotation_deg: f64,
    pub shift: (i32, i32),
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.rotation_deg == 0.0 && self.shift == (0, 0)
    }

    /// Source coordinate for output pixel `(y, x)`.
    fn source(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (y, x) = (y - self.shift.0 as f64 - cy, x - self.shift.1 as f64 - cx);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (ry, rx) = (c * y - s * x, s * y + c * x);
        let (sy, sx) = (ry + cy, rx + cx);
        if self.flip {
            (sy, w as f64 - 1.0 - sx)
        } else {
            (sy, sx)
        }
    }

    /// Bilinear resampling with zero fill outside the image.
    pub fn warp(&self, img: &Image) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = img.dim();
        let at = |y: i64, x: i64| {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0.0
            } else {
                img[[y as usize, x as usize]]
            }
        };
        Image::from_shape_fn((h, w), |(y, x)| {
            let (sy, sx) = self.source(y as f64, x as f64, h, w);
            // snap near-integer coordinates so flips and shifts are exact
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            let (sy, sx) = (snap(sy), snap(sx));
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let mut v = (1.0 - fy) * (1.0 - fx) * at(y0, x0);
            if fx > 0.0 {
                v += (1.0 - fy) * fx * at(y0, x0 + 1);
            }
            if fy > 0.0 {
                v += fy * (1.0 - fx) * at(y0 + 1, x0);
                if fx > 0.0 {
                    v += fy * fx * at(y0 + 1, x0 + 1);
                }
            }
            v
        })
    }
}

/// Applies one transform to every modality and logs it on the sample.
pub fn apply_transform(s: &PairedSample, t: &Transform) -> PairedSample {
    let images = s
        .images
        .iter()
        .zip(&s.modalities)
        .map(|(img, m)| {
            let out = t.warp(img);
            match m {
                Modality::Mask => out.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
                _ => out,
            }
        })
        .collect();
    let mut transforms = s.transforms.clone();
    transforms.push(*t);
    PairedSample {
        images,
        transforms,
        ..s.clone()
    }
}

pub fn augment<R: Rng + ?Sized>(s: &PairedSample, cfg: &AugmentConfig, rng: &mut R) -> PairedSample {
    apply_transform(s, &cfg.draw(rng))
}

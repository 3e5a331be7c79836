//! Paired-sample data: procedural phantoms, volume preprocessing, slice
//! extraction, augmentation, splits and the on-disk dataset format.

mod augment;
mod crop;
pub mod io;
mod phantom;
mod split;
mod volume;

pub use augment::{apply_transform, augment, AugmentConfig, Transform};
pub use crop::{crop_window, extract_tumour_slices, smart_crop, CropWindow, DEFAULT_CROP};
pub use phantom::{functional_threshold, generate_phantom, generate_phantoms, PhantomConfig};
pub use split::{split, split_indices, SplitIndices, SplitRatios};
pub use volume::{align_and_pad, resample_volume, Interpolation, Volume};

use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// CT-like structural image.
    Anatomy,
    /// PET-like uptake image.
    Functional,
    /// Binary tumour mask.
    Mask,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Anatomy, Modality::Functional, Modality::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Anatomy => "anatomy",
            Modality::Functional => "functional",
            Modality::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Real,
    Phantom,
    Synthetic,
    SeededSynthetic,
}

/// Co-registered single-channel images of one slice, raw intensities in
/// `[0, 1]` with masks in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub id: String,
    pub modalities: Vec<Modality>,
    pub images: Vec<Image>,
    pub source: SourceTag,
    /// Transforms applied to every modality, in order.
    #[serde(default)]
    pub transforms: Vec<Transform>,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, modalities: Vec<Modality>, images: Vec<Image>, source: SourceTag) -> Result<Self> {
        let s = Self {
            id: id.into(),
            modalities,
            images,
            source,
            transforms: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.modalities.len() {
            return Err(Error::Arity {
                what: "images",
                expected: self.modalities.len(),
                actual: self.images.len(),
            });
        }
        let Some(first) = self.images.first() else {
            return Err(Error::Data(format!("sample {} has no images", self.id)));
        };
        for img in &self.images {
            if img.dim() != first.dim() {
                return Err(Error::shape(first.shape(), img.shape()));
            }
        }
        if let Some(mask) = self.mask() {
            if !is_binary(mask) {
                return Err(Error::Validation(format!("mask of {} is not binary", self.id)));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.images[0].dim()
    }

    pub fn index_of(&self, modality: Modality) -> Option<usize> {
        self.modalities.iter().position(|&m| m == modality)
    }

    pub fn get(&self, modality: Modality) -> Option<&Image> {
        self.index_of(modality).map(|i| &self.images[i])
    }

    pub fn mask(&self) -> Option<&Image> {
        self.get(Modality::Mask)
    }

    /// All modalities mapped to the model range `[-1, 1]`.
    pub fn to_model_range(&self) -> Vec<Image> {
        self.images.iter().map(to_model_range).collect()
    }

    /// Builds a sample from model-range images; the mask is thresholded at 0.
    pub fn from_model_range(
        id: impl Into<String>,
        modalities: Vec<Modality>,
        images: &[Image],
        source: SourceTag,
    ) -> Result<Self> {
        let raw = images
            .iter()
            .zip(&modalities)
            .map(|(img, m)| match m {
                Modality::Mask => img.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                _ => from_model_range(img),
            })
            .collect();
        Self::new(id, modalities, raw, source)
    }
}

pub fn is_binary(img: &Image) -> bool {
    img.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Binary image of pixels strictly above `level`.
pub fn threshold(img: &Image, level: f64) -> Image {
    img.mapv(|v| if v > level { 1.0 } else { 0.0 })
}

/// `[0, 1] -> [-1, 1]`.
pub fn to_model_range(img: &Image) -> Image {
    img.mapv(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] -> [0, 1]`, clamped.
pub fn from_model_range(img: &Image) -> Image {
    img.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Dice between a generated mask and the thresholded generated functional
/// image, both given in the model range. The mask is binarized at 0 and the
/// functional at `functional_level` after mapping back to `[0, 1]`.
pub fn alignment_dice(images: &[Image], modalities: &[Modality], functional_level: f64) -> Result<f64> {
    let find = |m: Modality| {
        modalities
            .iter()
            .position(|&x| x == m)
            .and_then(|i| images.get(i))
            .ok_or_else(|| Error::Data(format!("no {} image", m.name())))
    };
    let mask = threshold(find(Modality::Mask)?, 0.0);
    let blob = threshold(&from_model_range(find(Modality::Functional)?), functional_level);
    crate::stats::dice(&mask, &blob)
}

/// Clips to `[lo, hi]` and rescales to `[0, 1]`, e.g. a CT window in HU.
pub fn window(img: &Image, lo: f64, hi: f64) -> Image {
    img.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

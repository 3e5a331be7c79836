use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use super::{is_binary, Modality, PairedSample, SourceTag, Volume};
use crate::{Error, Image, Result};

pub const DEFAULT_CROP: usize = 128;

/// Top-left corner and side length of a square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl CropWindow {
    pub fn apply(&self, img: &Image) -> Image {
        img.slice(s![self.row..self.row + self.size, self.col..self.col + self.size])
            .to_owned()
    }
}

fn clamped_start(center: f64, size: usize, len: usize) -> usize {
    let start = center.round() as i64 - (size / 2) as i64;
    start.clamp(0, (len - size) as i64) as usize
}

/// Window centred on the centre of mass of pixels above
/// `background_threshold`, falling back to the geometric centre.
pub fn crop_window(img: &Image, size: usize, background_threshold: f64) -> Result<CropWindow> {
    let (h, w) = img.dim();
    if size == 0 || size > h || size > w {
        return Err(Error::param("size", format!("crop of {size} does not fit a {h}x{w} slice")));
    }
    let (mut count, mut sy, mut sx) = (0usize, 0.0, 0.0);
    for ((y, x), &v) in img.indexed_iter() {
        if v > background_threshold {
            count += 1;
            sy += y as f64;
            sx += x as f64;
        }
    }
    let (cy, cx) = if count == 0 {
        ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
    } else {
        (sy / count as f64, sx / count as f64)
    };
    Ok(CropWindow {
        row: clamped_start(cy, size, h),
        col: clamped_start(cx, size, w),
        size,
    })
}

pub fn smart_crop(img: &Image, size: usize, background_threshold: f64) -> Result<Image> {
    Ok(crop_window(img, size, background_threshold)?.apply(img))
}

/// One sample per axial slice with at least one positive mask voxel.
///
/// `volumes` are aligned modality volumes in the order of `modalities`; the
/// mask is appended as the last modality. The crop window comes from the
/// anatomy volume when present, otherwise the first one, and is shared by
/// every modality of the slice.
pub fn extract_tumour_slices(
    volumes: &[Volume],
    modalities: &[Modality],
    mask: &Volume,
    size: usize,
    background_threshold: f64,
) -> Result<Vec<PairedSample>> {
    if volumes.len() != modalities.len() {
        return Err(Error::Arity {
            what: "modality volumes",
            expected: modalities.len(),
            actual: volumes.len(),
        });
    }
    if modalities.contains(&Modality::Mask) {
        return Err(Error::param("modalities", "the mask volume is passed separately"));
    }
    let dim = mask.voxels.dim();
    for v in volumes {
        if v.voxels.dim() != dim {
            return Err(Error::shape(mask.voxels.shape(), v.voxels.shape()));
        }
    }
    let reference = modalities.iter().position(|&m| m == Modality::Anatomy).unwrap_or(0);
    let mut names = modalities.to_vec();
    names.push(Modality::Mask);

    let mut out = Vec::new();
    for (z, mslice) in mask.voxels.axis_iter(Axis(0)).enumerate() {
        if !mslice.iter().any(|&v| v > 0.0) {
            continue;
        }
        let mslice = mslice.to_owned();
        if !is_binary(&mslice) {
            return Err(Error::Validation(format!("mask slice {z} is not binary")));
        }
        let slices: Vec<Image> = volumes.iter().map(|v| v.voxels.index_axis(Axis(0), z).to_owned()).collect();
        let win = match slices.get(reference) {
            Some(r) => crop_window(r, size, background_threshold)?,
            None => crop_window(&mslice, size, 0.5)?,
        };
        let mut images: Vec<Image> = slices.iter().map(|s| win.apply(s)).collect();
        images.push(win.apply(&mslice));
        out.push(PairedSample::new(format!("slice-{z:04}"), names.clone(), images, SourceTag::Real)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, PhantomConfig};
    use ndarray::{Array2, Array3};

    /// Brute force: try every admissible window and keep the one whose
    /// centre is closest to the mass centre.
    fn brute_window(img: &Image, size: usize, thr: f64) -> (usize, usize) {
        let pts: Vec<(usize, usize)> = img.indexed_iter().filter(|(_, &v)| v > thr).map(|(p, _)| p).collect();
        let (h, w) = img.dim();
        let (cy, cx) = if pts.is_empty() {
            ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
        } else {
            let n = pts.len() as f64;
            (
                pts.iter().map(|p| p.0 as f64).sum::<f64>() / n,
                pts.iter().map(|p| p.1 as f64).sum::<f64>() / n,
            )
        };
        let best = |c: f64, len: usize| {
            (0..=len - size)
                .min_by_key(|&s| ((s as f64 + (size / 2) as f64 - c.round()).abs() * 1e6) as i64)
                .unwrap()
        };
        (best(cy, h), best(cx, w))
    }

    #[test]
    fn bright_pixel_near_corner_clamps() {
        let mut img = Array2::zeros((256, 256));
        img[[10, 20]] = 1.0;
        let win = crop_window(&img, 128, 0.5).unwrap();
        assert_eq!((win.row, win.col), (0, 0));
        assert_eq!((win.row, win.col), brute_window(&img, 128, 0.5));
        assert_eq!(smart_crop(&img, 128, 0.5).unwrap()[[10, 20]], 1.0);
    }

    #[test]
    fn matches_brute_force_on_random_blobs() {
        for (i, p) in generate_phantoms(&PhantomConfig { image_size: 48, ..Default::default() }, 20)
            .unwrap()
            .iter()
            .enumerate()
        {
            let img = p.get(Modality::Functional).unwrap();
            let size = 16 + i;
            let win = crop_window(img, size, 0.4).unwrap();
            assert_eq!((win.row, win.col), brute_window(img, size, 0.4), "case {i}");
        }
    }

    #[test]
    fn uniform_slice_uses_geometric_centre() {
        let img = Array2::from_elem((200, 180), 0.3);
        for thr in [0.0, 0.5] {
            let win = crop_window(&img, 128, thr).unwrap();
            assert_eq!((win.row, win.col), (36, 26));
        }
    }

    #[test]
    fn centred_mass_gives_central_crop() {
        let mut img = Array2::zeros((9, 9));
        img.slice_mut(s![3..6, 3..6]).fill(1.0);
        let win = crop_window(&img, 5, 0.5).unwrap();
        assert_eq!((win.row, win.col), (2, 2));
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = Array2::zeros((64, 100));
        assert!(matches!(crop_window(&img, 65, 0.0), Err(Error::Parameter { name: "size", .. })));
    }

    fn stacked(depth: usize, positive: &[usize]) -> (Vec<Volume>, Volume) {
        let cfg = PhantomConfig { image_size: 40, ..Default::default() };
        let ph = generate_phantoms(&cfg, depth).unwrap();
        let stack = |m: Modality| {
            Array3::from_shape_fn((depth, 40, 40), |(z, y, x)| ph[z].get(m).unwrap()[[y, x]])
        };
        let mut mask = stack(Modality::Mask);
        for z in 0..depth {
            if !positive.contains(&z) {
                mask.index_axis_mut(Axis(0), z).fill(0.0);
            }
        }
        let vol = |a| Volume::new(a, [1.0; 3], [0.0; 3]).unwrap();
        (
            vec![vol(stack(Modality::Anatomy)), vol(stack(Modality::Functional))],
            vol(mask),
        )
    }

    #[test]
    fn only_positive_slices_are_kept() {
        let (vols, mask) = stacked(10, &[3, 7]);
        let out = extract_tumour_slices(&vols, &[Modality::Anatomy, Modality::Functional], &mask, 24, 0.1).unwrap();
        let ids: Vec<_> = out.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["slice-0003", "slice-0007"]);
        assert!(out.iter().all(|s| s.shape() == (24, 24) && is_binary(s.mask().unwrap())));
    }

    #[test]
    fn empty_mask_gives_nothing() {
        let (vols, mask) = stacked(4, &[]);
        let out = extract_tumour_slices(&vols, &[Modality::Anatomy, Modality::Functional], &mask, 24, 0.1).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn windows_are_shared_across_modalities() {
        let (vols, mask) = stacked(12, &(0..12).collect::<Vec<_>>());
        let out = extract_tumour_slices(&vols, &[Modality::Functional, Modality::Anatomy], &mask, 20, 0.1).unwrap();
        for s in &out {
            let z: usize = s.id[6..].parse().unwrap();
            let anatomy = vols[1].voxels.index_axis(Axis(0), z).to_owned();
            let win = crop_window(&anatomy, 20, 0.1).unwrap();
            for (k, v) in [&vols[0], &vols[1], &mask].iter().enumerate() {
                let full = v.voxels.index_axis(Axis(0), z).to_owned();
                assert_eq!(s.images[k], win.apply(&full), "slice {z} modality {k}");
            }
        }
    }
}

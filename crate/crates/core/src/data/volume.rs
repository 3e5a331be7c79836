use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scalar volume with voxels indexed `[z, y, x]`. `spacing` and `origin`
/// are in millimetres and ordered `(x, y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub voxels: Array3<f64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

impl Volume {
    pub fn new(voxels: Array3<f64>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let v = Self { voxels, spacing, origin };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::param("spacing", format!("{:?} must be positive", self.spacing)));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume holds non-finite voxels".into()));
        }
        Ok(())
    }

    /// Voxel counts ordered `(x, y, z)`.
    pub fn dims_xyz(&self) -> [usize; 3] {
        let (z, y, x) = self.voxels.dim();
        [x, y, z]
    }

    /// Reads a NIfTI-1 file; spacing comes from `pixdim` and the origin from
    /// the qform offsets. Data are expected in `(x, y, z)` order on disk.
    #[cfg(feature = "nifti")]
    pub fn from_nifti(path: impl AsRef<std::path::Path>) -> Result<Self> {
        use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
        let path = path.as_ref();
        let obj = ReaderOptions::new()
            .read_file(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let header = obj.header().clone();
        let data = obj
            .into_volume()
            .into_ndarray::<f64>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let shape = data.shape().to_vec();
        if shape.len() < 3 {
            return Err(Error::Data(format!("{}: expected a 3D volume, got {shape:?}", path.display())));
        }
        let (nx, ny, nz) = (shape[0], shape[1], shape[2]);
        let flat: Vec<f64> = data.iter().copied().collect();
        // nifti-rs yields column-major (x fastest) order
        let voxels = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| flat[x * ny * nz + y * nz + z]);
        let spacing = [
            header.pixdim[1] as f64,
            header.pixdim[2] as f64,
            header.pixdim[3] as f64,
        ];
        let origin = [header.quatern_x as f64, header.quatern_y as f64, header.quatern_z as f64];
        Volume::new(voxels, spacing, origin)
    }
}

fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    (n as f64 * from / to).round() as usize
}

/// Resamples onto a new voxel grid sharing the same origin. Output size per
/// axis is `round(n * spacing / target)`.
pub fn resample_volume(v: &Volume, target_spacing: [f64; 3], method: Interpolation) -> Result<Volume> {
    v.validate()?;
    if target_spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::param("target_spacing", format!("{target_spacing:?} must be positive")));
    }
    let [nx, ny, nz] = v.dims_xyz();
    let out_x = resampled_len(nx, v.spacing[0], target_spacing[0]);
    let out_y = resampled_len(ny, v.spacing[1], target_spacing[1]);
    let out_z = resampled_len(nz, v.spacing[2], target_spacing[2]);
    if out_x == 0 || out_y == 0 || out_z == 0 {
        return Err(Error::Data(format!(
            "resampling {nx}x{ny}x{nz} at {:?} mm to {target_spacing:?} mm leaves an empty axis",
            v.spacing
        )));
    }
    let scale = [
        target_spacing[0] / v.spacing[0],
        target_spacing[1] / v.spacing[1],
        target_spacing[2] / v.spacing[2],
    ];
    let src = &v.voxels;
    let coord = |i: usize, axis: usize, n: usize| (i as f64 * scale[axis]).clamp(0.0, (n - 1) as f64);
    let voxels = Array3::from_shape_fn((out_z, out_y, out_x), |(z, y, x)| {
        let (cz, cy, cx) = (coord(z, 2, nz), coord(y, 1, ny), coord(x, 0, nx));
        match method {
            Interpolation::Nearest => src[[
                (cz.round() as usize).min(nz - 1),
                (cy.round() as usize).min(ny - 1),
                (cx.round() as usize).min(nx - 1),
            ]],
            Interpolation::Trilinear => {
                let (z0, y0, x0) = (cz.floor() as usize, cy.floor() as usize, cx.floor() as usize);
                let (z1, y1, x1) = ((z0 + 1).min(nz - 1), (y0 + 1).min(ny - 1), (x0 + 1).min(nx - 1));
                let (fz, fy, fx) = (cz - z0 as f64, cy - y0 as f64, cx - x0 as f64);
                let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                let c00 = lerp(src[[z0, y0, x0]], src[[z0, y0, x1]], fx);
                let c01 = lerp(src[[z0, y1, x0]], src[[z0, y1, x1]], fx);
                let c10 = lerp(src[[z1, y0, x0]], src[[z1, y0, x1]], fx);
                let c11 = lerp(src[[z1, y1, x0]], src[[z1, y1, x1]], fx);
                lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
            }
        }
    });
    Volume::new(voxels, target_spacing, v.origin)
}

/// Places volumes on a common lattice using their origins.
///
/// Origins are snapped to whole voxels of the shared spacing. The result
/// covers the intersection of all footprints along `x` and `z`, and the
/// union along the vertical `y` axis, where each volume is padded with its
/// own background value.
pub fn align_and_pad(volumes: &[Volume], backgrounds: &[f64]) -> Result<Vec<Volume>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Data("align_and_pad needs at least one volume".into()))?;
    if backgrounds.len() != volumes.len() {
        return Err(Error::Arity {
            what: "background values",
            expected: volumes.len(),
            actual: backgrounds.len(),
        });
    }
    let spacing = first.spacing;
    for v in volumes {
        v.validate()?;
        if v.spacing.iter().zip(&spacing).any(|(a, b)| (a - b).abs() > 1e-9 * b) {
            return Err(Error::param("spacing", format!("{:?} differs from {spacing:?}; resample first", v.spacing)));
        }
    }
    // per volume, per axis (x, y, z): start offset in voxels relative to the first
    let starts: Vec<[i64; 3]> = volumes
        .iter()
        .map(|v| std::array::from_fn(|a| ((v.origin[a] - first.origin[a]) / spacing[a]).round() as i64))
        .collect();
    let dims: Vec<[i64; 3]> = volumes.iter().map(|v| v.dims_xyz().map(|d| d as i64)).collect();

    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    for a in 0..3 {
        let s = starts.iter().map(|s| s[a]);
        let e = starts.iter().zip(&dims).map(|(s, d)| s[a] + d[a]);
        if a == 1 {
            lo[a] = s.min().unwrap();
            hi[a] = e.max().unwrap();
        } else {
            lo[a] = s.max().unwrap();
            hi[a] = e.min().unwrap();
        }
        if hi[a] <= lo[a] {
            let extents: Vec<String> = starts
                .iter()
                .zip(&dims)
                .map(|(s, d)| format!("[{}, {})", s[a], s[a] + d[a]))
                .collect();
            return Err(Error::Data(format!(
                "empty intersection along {} axis; voxel extents {}",
                ["x", "y", "z"][a],
                extents.join(", ")
            )));
        }
    }
    let shape = (
        (hi[2] - lo[2]) as usize,
        (hi[1] - lo[1]) as usize,
        (hi[0] - lo[0]) as usize,
    );
    let origin: [f64; 3] = std::array::from_fn(|a| first.origin[a] + lo[a] as f64 * spacing[a]);

    volumes
        .iter()
        .zip(&starts)
        .zip(backgrounds)
        .map(|((v, s), &bg)| {
            let [nx, ny, nz] = v.dims_xyz().map(|d| d as i64);
            let voxels = Array3::from_shape_fn(shape, |(z, y, x)| {
                let sx = lo[0] + x as i64 - s[0];
                let sy = lo[1] + y as i64 - s[1];
                let sz = lo[2] + z as i64 - s[2];
                if (0..nx).contains(&sx) && (0..ny).contains(&sy) && (0..nz).contains(&sz) {
                    v.voxels[[sz as usize, sy as usize, sx as usize]]
                } else {
                    bg
                }
            });
            Volume::new(voxels, spacing, origin)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.random::<f64>())
    }

    #[test]
    fn halving_resolution_halves_dims() {
        let v = Volume::new(Array3::zeros((64, 64, 64)), [1.0; 3], [0.0; 3]).unwrap();
        let out = resample_volume(&v, [2.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(out.voxels.dim(), (32, 32, 32));
        let back = resample_volume(&out, [1.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(back.voxels.dim(), (64, 64, 64));
    }

    #[test]
    fn anisotropic_dims() {
        let v = Volume::new(Array3::zeros((10, 20, 30)), [0.5, 1.0, 3.0], [0.0; 3]).unwrap();
        let out = resample_volume(&v, [2.0; 3], Interpolation::Nearest).unwrap();
        // x: 30*0.5/2 = 7.5 -> 8, y: 20*1/2 = 10, z: 10*3/2 = 15
        assert_eq!(out.dims_xyz(), [8, 10, 15]);
    }

    #[test]
    fn constants_survive_both_methods() {
        let v = Volume::new(Array3::from_elem((9, 7, 5), 3.25), [1.0, 1.5, 0.7], [0.0; 3]).unwrap();
        for m in [Interpolation::Trilinear, Interpolation::Nearest] {
            let out = resample_volume(&v, [2.0, 2.0, 2.0], m).unwrap();
            assert!(out.voxels.iter().all(|&x| (x - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn nearest_keeps_masks_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = Array3::from_shape_simple_fn((12, 13, 14), || if rng.random::<f64>() > 0.7 { 1.0 } else { 0.0 });
        let v = Volume::new(mask, [0.8, 0.9, 1.3], [0.0; 3]).unwrap();
        let out = resample_volume(&v, [2.0; 3], Interpolation::Nearest).unwrap();
        assert!(out.voxels.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn trilinear_interpolates_ramps_exactly() {
        let ramp = Array3::from_shape_fn((4, 4, 8), |(_, _, x)| x as f64);
        let v = Volume::new(ramp, [1.0; 3], [0.0; 3]).unwrap();
        let out = resample_volume(&v, [0.5, 1.0, 1.0], Interpolation::Trilinear).unwrap();
        for x in 0..14 {
            assert!((out.voxels[[1, 2, x]] - x as f64 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_axis_is_a_data_error() {
        let v = Volume::new(Array3::zeros((1, 4, 4)), [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(
            resample_volume(&v, [1.0, 1.0, 4.0], Interpolation::Nearest),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn aligned_inputs_pass_through() {
        let a = Volume::new(random_volume((5, 6, 7), 1), [2.0; 3], [10.0, -4.0, 3.0]).unwrap();
        let b = Volume::new(random_volume((5, 6, 7), 2), [2.0; 3], [10.0, -4.0, 3.0]).unwrap();
        let out = align_and_pad(&[a.clone(), b.clone()], &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![a, b]);
    }

    /// Reference: look up every output voxel by world coordinate.
    fn world_lookup(v: &Volume, world: [f64; 3], bg: f64) -> f64 {
        let idx: [f64; 3] = std::array::from_fn(|a| (world[a] - v.origin[a]) / v.spacing[a]);
        let [nx, ny, nz] = v.dims_xyz();
        let inside = |i: f64, n: usize| i.round() >= 0.0 && (i.round() as usize) < n;
        if inside(idx[0], nx) && inside(idx[1], ny) && inside(idx[2], nz) {
            v.voxels[[idx[2].round() as usize, idx[1].round() as usize, idx[0].round() as usize]]
        } else {
            bg
        }
    }

    #[test]
    fn one_slice_offset_matches_world_lookup() {
        let a = Volume::new(random_volume((6, 5, 4), 3), [2.0; 3], [0.0, 0.0, 0.0]).unwrap();
        let b = Volume::new(random_volume((6, 5, 4), 4), [2.0; 3], [0.0, 0.0, 2.0]).unwrap();
        let out = align_and_pad(&[a.clone(), b.clone()], &[-1.0, -2.0]).unwrap();
        assert_eq!(out[0].voxels.dim(), out[1].voxels.dim());
        assert_eq!(out[0].voxels.dim(), (5, 5, 4));
        assert_eq!(out[0].origin, [0.0, 0.0, 2.0]);
        // b's first slice now lines up with a's second
        assert_eq!(out[1].voxels.index_axis(ndarray::Axis(0), 0), b.voxels.index_axis(ndarray::Axis(0), 0));
        assert_eq!(out[0].voxels.index_axis(ndarray::Axis(0), 0), a.voxels.index_axis(ndarray::Axis(0), 1));
        for (o, (src, bg)) in out.iter().zip([(&a, -1.0), (&b, -2.0)]) {
            for ((z, y, x), &val) in o.voxels.indexed_iter() {
                let world = [
                    o.origin[0] + x as f64 * 2.0,
                    o.origin[1] + y as f64 * 2.0,
                    o.origin[2] + z as f64 * 2.0,
                ];
                assert_eq!(val, world_lookup(src, world, bg));
            }
        }
    }

    #[test]
    fn vertical_offsets_are_padded() {
        let a = Volume::new(random_volume((3, 4, 5), 5), [1.0; 3], [0.0; 3]).unwrap();
        let b = Volume::new(random_volume((3, 4, 5), 6), [1.0; 3], [0.0, 2.0, 0.0]).unwrap();
        let out = align_and_pad(&[a, b.clone()], &[-7.0, -9.0]).unwrap();
        assert_eq!(out[0].voxels.dim(), (3, 6, 5));
        assert!(out[0].voxels.slice(ndarray::s![.., 4.., ..]).iter().all(|&v| v == -7.0));
        assert!(out[1].voxels.slice(ndarray::s![.., ..2, ..]).iter().all(|&v| v == -9.0));
        assert_eq!(out[1].voxels.slice(ndarray::s![.., 2.., ..]), b.voxels);
    }

    #[test]
    fn disjoint_volumes_error() {
        let a = Volume::new(Array3::zeros((4, 4, 4)), [1.0; 3], [0.0; 3]).unwrap();
        let b = Volume::new(Array3::zeros((4, 4, 4)), [1.0; 3], [0.0, 0.0, 10.0]).unwrap();
        let err = align_and_pad(&[a, b], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("z axis")), "{err}");
    }

    #[test]
    fn mixed_spacing_rejected() {
        let a = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3], [0.0; 3]).unwrap();
        let b = Volume::new(Array3::zeros((2, 2, 2)), [2.0; 3], [0.0; 3]).unwrap();
        assert!(align_and_pad(&[a, b], &[0.0, 0.0]).is_err());
    }
}

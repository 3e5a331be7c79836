//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json      split membership by sample id
//! <dir>/<id>.f32           little-endian f32 planes in modality order
//! <dir>/<id>.json          id, shape, modalities, source tag, transforms
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Modality, PairedSample, SourceTag, SplitIndices, Transform};
use crate::{Error, Image, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub shape: (usize, usize),
    pub modalities: Vec<Modality>,
    pub source: SourceTag,
    #[serde(default)]
    pub transforms: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn from_indices(samples: &[PairedSample], idx: &SplitIndices) -> Self {
        let ids = |ix: &[usize]| ix.iter().map(|&i| samples[i].id.clone()).collect();
        Self {
            train: ids(&idx.train),
            val: ids(&idx.val),
            test: ids(&idx.test),
        }
    }

    /// Every sample in the training split.
    pub fn unsplit(samples: &[PairedSample]) -> Self {
        Self {
            train: samples.iter().map(|s| s.id.clone()).collect(),
            ..Default::default()
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Data(format!("sample id {id:?} is not a safe file name")))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_sample(dir: &Path, s: &PairedSample) -> Result<()> {
    s.validate()?;
    check_id(&s.id)?;
    let bytes: Vec<u8> = s
        .images
        .iter()
        .flat_map(|img| img.iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect();
    let bin = dir.join(format!("{}.f32", s.id));
    fs::write(&bin, bytes).map_err(Error::io(&bin))?;
    let meta = SampleMeta {
        id: s.id.clone(),
        shape: s.shape(),
        modalities: s.modalities.clone(),
        source: s.source,
        transforms: s.transforms.clone(),
    };
    write_json(&dir.join(format!("{}.json", s.id)), &meta)
}

pub fn read_sample(dir: &Path, id: &str) -> Result<PairedSample> {
    check_id(id)?;
    let meta: SampleMeta = read_json(&dir.join(format!("{id}.json")))?;
    let bin = dir.join(format!("{id}.f32"));
    let bytes = fs::read(&bin).map_err(Error::io(&bin))?;
    let (h, w) = meta.shape;
    let plane = h * w;
    let expected = plane * meta.modalities.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {expected} for {} planes of {h}x{w}",
            bin.display(),
            bytes.len(),
            meta.modalities.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let images = values
        .chunks_exact(plane)
        .map(|p| Image::from_shape_vec((h, w), p.to_vec()).expect("plane length checked"))
        .collect();
    let mut s = PairedSample::new(meta.id, meta.modalities, images, meta.source)?;
    s.transforms = meta.transforms;
    Ok(s)
}

/// Writes every sample plus the manifest. The manifest must only name
/// samples that are being written.
pub fn write_dataset(dir: &Path, samples: &[PairedSample], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let ids: std::collections::HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != samples.len() {
        return Err(Error::Data("duplicate sample ids".into()));
    }
    if let Some(missing) = manifest.all().find(|id| !ids.contains(id.as_str())) {
        return Err(Error::Data(format!("manifest names unknown sample {missing}")));
    }
    for s in samples {
        write_sample(dir, s)?;
    }
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    let m = read_manifest(dir)?;
    let load = |ids: &[String]| ids.iter().map(|id| read_sample(dir, id)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: load(&m.train)?,
        val: load(&m.val)?,
        test: load(&m.test)?,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves one raw `[0, 1]` image as 8-bit grey PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    save_grid(&[vec![img.clone()]], path, 0).map(drop)
}

/// Tiles `rows` of equal-shape images into one PNG with `pad` black pixels
/// between tiles, e.g. one row per sample and one column per modality.
pub fn save_grid(rows: &[Vec<Image>], path: &Path, pad: usize) -> Result<PathBuf> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Data("nothing to export".into()))?;
    let (h, w) = first.dim();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * w + cols.saturating_sub(1) * pad;
    let height = rows.len() * h + rows.len().saturating_sub(1) * pad;
    let mut canvas = image::GrayImage::new(width as u32, height as u32);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::shape(&[h, w], img.shape()));
            }
            let (oy, ox) = (r * (h + pad), c * (w + pad));
            for ((y, x), &v) in img.indexed_iter() {
                canvas.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([to_u8(v)]));
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    canvas.save(path)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_transform, generate_phantoms, split_indices, PhantomConfig, SplitRatios};

    #[test]
    fn round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = generate_phantoms(&PhantomConfig::default(), 10).unwrap();
        samples[2] = apply_transform(&samples[2], &Transform { flip: true, rotation_deg: 3.0, shift: (1, -2) });
        let idx = split_indices(samples.len(), SplitRatios::default(), 4).unwrap();
        let m = Manifest::from_indices(&samples, &idx);
        write_dataset(dir.path(), &samples, &m).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let orig = samples.iter().find(|o| o.id == s.id).unwrap();
            assert_eq!(s.modalities, orig.modalities);
            assert_eq!(s.transforms, orig.transforms);
            for (a, b) in s.images.iter().zip(&orig.images) {
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn planes_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantoms(&PhantomConfig::default(), 1).unwrap().remove(0);
        write_sample(dir.path(), &s).unwrap();
        let bytes = fs::read(dir.path().join(format!("{}.f32", s.id))).unwrap();
        assert_eq!(bytes.len(), 3 * 32 * 32 * 4);
        let v = f32::from_le_bytes(bytes[4 * 32 * 32..4 * 32 * 32 + 4].try_into().unwrap());
        assert_eq!(v, s.images[1][[0, 0]] as f32);
    }

    #[test]
    fn truncated_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantoms(&PhantomConfig::default(), 1).unwrap().remove(0);
        write_sample(dir.path(), &s).unwrap();
        let bin = dir.path().join(format!("{}.f32", s.id));
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(100);
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(read_sample(dir.path(), &s.id), Err(Error::Data(_))));
    }

    #[test]
    fn unsafe_ids_and_missing_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_sample(dir.path(), "../x").is_err());
        assert!(matches!(read_dataset(&dir.path().join("nope")), Err(Error::Data(_))));
        let s = generate_phantoms(&PhantomConfig::default(), 1).unwrap();
        let m = Manifest { test: vec!["ghost".into()], ..Default::default() };
        assert!(write_dataset(dir.path(), &s, &m).is_err());
    }

    #[test]
    fn grid_png_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantoms(&PhantomConfig::default(), 2).unwrap();
        let rows: Vec<Vec<Image>> = s.iter().map(|s| s.images.clone()).collect();
        let path = save_grid(&rows, &dir.path().join("grid.png"), 2).unwrap();
        let img = image::open(path).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 32 + 4, 2 * 32 + 2));
    }
}

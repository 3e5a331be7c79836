use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use pairdiff_core::diffusion::{NoiseSchedule, ScheduleSpec};
use pairdiff_core::embedding::embed_timestep;
use pairdiff_core::sampler::CoupledEps;
use pairdiff_core::spectral::FilterParams;
use pairdiff_core::Image;
use serde::{Deserialize, Serialize};

use crate::denoiser::{embedding_tensor, Conditioning, Denoiser, DenoiserConfig};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// `(B, 1, H, W)` tensor from equal-shape images.
pub fn images_to_tensor(images: &[Image], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = first.dim();
    let mut v = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(pairdiff_core::Error::shape(&[h, w], img.shape()).into());
        }
        v.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(v, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::param("channels", format!("expected 1, got {c}")));
    }
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| Image::from_shape_vec((h, w), v[i * h * w..(i + 1) * h * w].to_vec()).expect("dims4 shape"))
        .collect())
}

/// One denoiser per modality; network `k` is conditioned on every other
/// modality in order.
#[derive(Debug)]
pub struct CoupledModelSet {
    networks: Vec<Denoiser>,
    pub conditioning: Conditioning,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSnapshot {
    pub network: usize,
    pub condition: usize,
    pub t: usize,
    pub params: FilterParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub conditioning: Conditioning,
    /// Controller output at each tenth of the schedule, for inspection.
    pub filters: Vec<FilterSnapshot>,
    #[serde(default)]
    pub note: String,
}

impl CoupledModelSet {
    pub fn new(
        cfg: &DenoiserConfig,
        schedule: NoiseSchedule,
        conditioning: Conditioning,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let networks = (0..cfg.modality_count)
            .map(|k| Denoiser::new(cfg, seed.wrapping_mul(0x9E37_79B9).wrapping_add(k as u64), dtype))
            .collect::<Result<_>>()?;
        Ok(Self {
            networks,
            conditioning,
            schedule,
        })
    }

    pub fn from_networks(networks: Vec<Denoiser>, schedule: NoiseSchedule, conditioning: Conditioning) -> Result<Self> {
        let n = networks.len();
        if n == 0 || networks.iter().any(|d| d.config().modality_count != n) {
            return Err(Error::param("networks", "every network must be built for the set size"));
        }
        Ok(Self {
            networks,
            conditioning,
            schedule,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.networks[0].config()
    }

    pub fn dtype(&self) -> DType {
        self.networks[0].dtype()
    }

    pub fn networks(&self) -> &[Denoiser] {
        &self.networks
    }

    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.networks.iter().map(Denoiser::param_count).sum()
    }

    /// Noise prediction of network `k` given every modality's `x_t` batch.
    pub fn forward(&self, k: usize, x_t: &[Tensor], emb: &Tensor) -> Result<Tensor> {
        let net = self
            .networks
            .get(k)
            .ok_or_else(|| Error::param("k", format!("no network {k}")))?;
        if x_t.len() != self.networks.len() {
            return Err(Error::Arity {
                what: "modalities",
                expected: self.networks.len(),
                actual: x_t.len(),
            });
        }
        let conditions: Vec<Tensor> = x_t
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, t)| t.clone())
            .collect();
        net.forward(&x_t[k], &conditions, emb, self.conditioning)
    }

    pub fn filter_snapshots(&self) -> Result<Vec<FilterSnapshot>> {
        let steps = self.schedule.steps();
        let mut out = Vec::new();
        for (k, net) in self.networks.iter().enumerate() {
            for (j, f) in net.filters().enumerate() {
                let core = f.to_core()?;
                for decile in 1..=10 {
                    let t = (steps * decile).div_ceil(10).max(1);
                    let params = core.emit(&embed_timestep(t, self.config().embed_dim)?)?;
                    out.push(FilterSnapshot {
                        network: k,
                        condition: j,
                        t,
                        params,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, note: &str) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            schedule: self.schedule.spec(),
            conditioning: self.conditioning,
            filters: self.filter_snapshots()?,
            note: note.to_string(),
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, net) in self.networks.iter().enumerate() {
            for (name, var) in net.store().vars() {
                tensors.push((format!("{k}/{name}"), var.as_tensor().to_dtype(DType::F32)?));
            }
        }
        let header = HashMap::from([(
            "pairdiff".to_string(),
            serde_json::to_string(&meta).map_err(|e| Error::checkpoint(path, e))?,
        )]);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        safetensors::serialize_to_file(tensors, Some(header), path).map_err(|e| Error::checkpoint(path, e))
    }

    pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::meta_from_bytes(path, &bytes)
    }

    fn meta_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::checkpoint(path, e))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("pairdiff"))
            .ok_or_else(|| Error::checkpoint(path, "missing pairdiff metadata"))?;
        let meta: CheckpointMeta = serde_json::from_str(text).map_err(|e| Error::checkpoint(path, e))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(
                path,
                format!("version {} is not supported (expected {CHECKPOINT_VERSION})", meta.version),
            ));
        }
        Ok(meta)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let meta = Self::meta_from_bytes(path, &bytes)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e))?;
        let set = Self::new(&meta.config, meta.schedule.build()?, meta.conditioning, 0, dtype)?;
        let expected: usize = set.networks.iter().map(|n| n.store().vars().len()).sum();
        if st.len() != expected {
            return Err(Error::checkpoint(path, format!("{} tensors, expected {expected}", st.len())));
        }
        for (k, net) in set.networks.iter().enumerate() {
            for (name, var) in net.store().vars() {
                let key = format!("{k}/{name}");
                let view = st.tensor(&key).map_err(|e| Error::checkpoint(path, format!("{key}: {e}")))?;
                if view.shape() != var.dims() {
                    return Err(Error::checkpoint(path, format!("{key}: shape {:?} != {:?}", view.shape(), var.dims())));
                }
                let values: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?.to_dtype(dtype)?;
                var.set(&t)?;
            }
        }
        Ok((set, meta))
    }
}

impl CoupledEps for CoupledModelSet {
    fn modality_count(&self) -> usize {
        self.networks.len()
    }

    fn predict(&self, k: usize, x_t: &[Image], conditions: &[&[Image]], t: usize) -> pairdiff_core::Result<Vec<Image>> {
        let dtype = self.dtype();
        let mut all = Vec::with_capacity(self.networks.len());
        let mut cond = conditions.iter();
        for j in 0..self.networks.len() {
            if j == k {
                all.push(images_to_tensor(x_t, dtype)?);
            } else {
                let c = cond.next().ok_or(pairdiff_core::Error::Arity {
                    what: "conditions",
                    expected: self.networks.len() - 1,
                    actual: conditions.len(),
                })?;
                all.push(images_to_tensor(c, dtype)?);
            }
        }
        let emb = embedding_tensor(&vec![t; x_t.len()], self.config().embed_dim, dtype, &Device::Cpu)?;
        let eps = self.forward(k, &all, &emb)?;
        Ok(tensor_to_images(&eps)?)
    }
}

//! Joint training of the coupled set: one shared loss, one optimizer per
//! network.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use pairdiff_core::data::{augment, AugmentConfig};
use pairdiff_core::data::PairedSample;
use pairdiff_core::diffusion::{forward_diffuse_with, sample_offset_noise, NoiseSchedule};
use pairdiff_core::Image;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::embedding_tensor;
use crate::model_set::{images_to_tensor, CoupledModelSet};
use crate::optim::{NetOptimizer, OptimizerKind};
use crate::perceptual::{perceptual_loss, FeatureExtractor, FeaturePyramid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub offset_weight: f64,
    pub perceptual_gate_epoch: usize,
    pub perceptual_weight: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub extractor_seed: u64,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            offset_weight: 0.1,
            perceptual_gate_epoch: 50,
            perceptual_weight: 0.1,
            seed: 0,
            optimizer: OptimizerKind::SgdMomentum,
            extractor_seed: 0x5eed,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("perceptual_weight", self.perceptual_weight),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, format!("{v} must be positive")));
            }
        }
        if !(self.offset_weight >= 0.0) || !self.offset_weight.is_finite() {
            return Err(Error::param("offset_weight", format!("{} must be >= 0", self.offset_weight)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub mse: Vec<f64>,
    pub perceptual: f64,
    pub gated: bool,
    pub total: f64,
}

impl LossReport {
    fn new(epoch: usize, step: usize, mse: Vec<f64>, perceptual: f64, gated: bool, weight: f64) -> Self {
        let mut total = mse.iter().sum::<f64>();
        if gated {
            total += weight * perceptual;
        }
        Self {
            epoch,
            step,
            mse,
            perceptual,
            gated,
            total,
        }
    }
}

/// A corrupted batch: per-element steps, and per-modality `(B, 1, H, W)`
/// clean images, noise and noisy images.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub ts: Vec<usize>,
    pub x0: Vec<Tensor>,
    pub noise: Vec<Tensor>,
    pub x_t: Vec<Tensor>,
}

/// For each element draws one `t`, then one offset-noise field per modality.
pub fn corrupt_batch<R: Rng + ?Sized>(
    batch: &[PairedSample],
    modality_count: usize,
    schedule: &NoiseSchedule,
    offset_weight: f64,
    dtype: DType,
    rng: &mut R,
) -> Result<Corruption> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut ts = Vec::with_capacity(batch.len());
    let mut x0 = vec![Vec::<Image>::new(); modality_count];
    let mut noise = x0.clone();
    let mut x_t = x0.clone();
    for s in batch {
        if s.images.len() != modality_count {
            return Err(Error::Arity {
                what: "modalities per sample",
                expected: modality_count,
                actual: s.images.len(),
            });
        }
        let t = rng.random_range(1..=schedule.steps());
        ts.push(t);
        for (k, img) in s.to_model_range().into_iter().enumerate() {
            let n = sample_offset_noise(img.dim(), offset_weight, rng)?.values;
            x_t[k].push(forward_diffuse_with(&img, t, &n, schedule)?);
            noise[k].push(n);
            x0[k].push(img);
        }
    }
    let stack = |v: Vec<Vec<Image>>| -> Result<Vec<Tensor>> { v.iter().map(|b| images_to_tensor(b, dtype)).collect() };
    Ok(Corruption {
        ts,
        x0: stack(x0)?,
        noise: stack(noise)?,
        x_t: stack(x_t)?,
    })
}

/// Clamped in-graph clean-image estimate for a batch with per-element steps.
pub fn estimate_x0_tensor(x_t: &Tensor, eps: &Tensor, ts: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    let (b, _, _, _) = x_t.dims4()?;
    if ts.len() != b {
        return Err(Error::Arity {
            what: "timesteps",
            expected: b,
            actual: ts.len(),
        });
    }
    let mut a = Vec::with_capacity(b);
    let mut c = Vec::with_capacity(b);
    for &t in ts {
        let ab = schedule.alpha_bar(t)?;
        a.push(1.0 / ab.sqrt());
        c.push((1.0 - ab).sqrt() / ab.sqrt());
    }
    let dt = x_t.dtype();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dt)?;
    let c = Tensor::from_vec(c, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dt)?;
    let raw = (x_t.broadcast_mul(&a)? - eps.broadcast_mul(&c)?)?;
    Ok(raw.clamp(-1.0, 1.0)?)
}

/// Differentiable pieces of the shared loss.
#[derive(Debug)]
pub struct LossTerms {
    pub mse: Vec<Tensor>,
    pub perceptual: Option<Tensor>,
    pub total: Tensor,
}

/// Shared loss from noise predictions; the perceptual term is only built
/// when `gated` is set.
pub fn loss_terms(
    c: &Corruption,
    eps_pred: &[Tensor],
    schedule: &NoiseSchedule,
    gated: bool,
    perceptual_weight: f64,
    extractor: &dyn FeaturePyramid,
) -> Result<LossTerms> {
    if eps_pred.len() != c.noise.len() {
        return Err(Error::Arity {
            what: "noise predictions",
            expected: c.noise.len(),
            actual: eps_pred.len(),
        });
    }
    let mse = eps_pred
        .iter()
        .zip(&c.noise)
        .map(|(p, n)| Ok((p - n)?.sqr()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Tensor::stack(&mse, 0)?.sum_all()?;
    let perceptual = if gated {
        let x0_hats = c
            .x_t
            .iter()
            .zip(eps_pred)
            .map(|(x, e)| estimate_x0_tensor(x, e, &c.ts, schedule))
            .collect::<Result<Vec<_>>>()?;
        let p = perceptual_loss(&x0_hats, extractor)?;
        total = (total + p.affine(perceptual_weight, 0.0)?)?;
        Some(p)
    } else {
        None
    };
    Ok(LossTerms { mse, perceptual, total })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Model set plus the optimizer state and frozen extractor that training
/// needs.
pub struct Trainer {
    pub models: CoupledModelSet,
    optimizers: Vec<NetOptimizer>,
    extractor: Box<dyn FeaturePyramid>,
    pub cfg: TrainConfig,
    step: usize,
}

impl Trainer {
    pub fn new(models: CoupledModelSet, cfg: TrainConfig) -> Result<Self> {
        let extractor = FeatureExtractor::seeded(cfg.extractor_seed, models.dtype())?;
        Self::with_extractor(models, cfg, Box::new(extractor))
    }

    pub fn with_extractor(models: CoupledModelSet, cfg: TrainConfig, extractor: Box<dyn FeaturePyramid>) -> Result<Self> {
        cfg.validate()?;
        let optimizers = models
            .networks()
            .iter()
            .map(|n| NetOptimizer::new(cfg.optimizer, n.store().all_vars(), cfg.learning_rate))
            .collect::<Result<_>>()?;
        Ok(Self {
            models,
            optimizers,
            extractor,
            cfg,
            step: 0,
        })
    }

    /// A frozen network still takes part in the shared loss but keeps its
    /// weights.
    pub fn set_frozen(&mut self, k: usize, frozen: bool) -> Result<()> {
        self.optimizers
            .get_mut(k)
            .ok_or_else(|| Error::param("k", format!("no network {k}")))?
            .set_frozen(frozen);
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn extractor(&self) -> &dyn FeaturePyramid {
        self.extractor.as_ref()
    }

    fn predict_all(&self, c: &Corruption) -> Result<Vec<Tensor>> {
        let cfg = self.models.config();
        let emb = embedding_tensor(&c.ts, cfg.embed_dim, self.models.dtype(), &Device::Cpu)?;
        (0..self.models.len()).map(|k| self.models.forward(k, &c.x_t, &emb)).collect()
    }

    /// One joint update on `batch`.
    pub fn training_step<R: Rng + ?Sized>(&mut self, batch: &[PairedSample], epoch: usize, rng: &mut R) -> Result<LossReport> {
        let c = corrupt_batch(
            batch,
            self.models.len(),
            &self.models.schedule,
            self.cfg.offset_weight,
            self.models.dtype(),
            rng,
        )?;
        let eps = self.predict_all(&c)?;
        let gated = epoch >= self.cfg.perceptual_gate_epoch;
        let terms = loss_terms(
            &c,
            &eps,
            &self.models.schedule,
            gated,
            self.cfg.perceptual_weight,
            self.extractor.as_ref(),
        )?;
        let grads = terms.total.backward()?;
        for opt in &mut self.optimizers {
            opt.step(&grads)?;
        }
        let mse = terms.mse.iter().map(scalar).collect::<Result<Vec<_>>>()?;
        let perceptual = terms.perceptual.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
        let report = LossReport::new(epoch, self.step, mse, perceptual, gated, self.cfg.perceptual_weight);
        self.step += 1;
        Ok(report)
    }

    /// Mean per-modality noise-prediction loss over `samples`, with a fixed
    /// corruption stream so epochs are comparable.
    pub fn validation_loss(&self, samples: &[PairedSample]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::Data("empty validation split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ VALIDATION_SALT);
        let mut sums = vec![0.0; self.models.len()];
        for chunk in samples.chunks(self.cfg.batch_size) {
            let c = corrupt_batch(
                chunk,
                self.models.len(),
                &self.models.schedule,
                self.cfg.offset_weight,
                self.models.dtype(),
                &mut rng,
            )?;
            for (k, eps) in self.predict_all(&c)?.iter().enumerate() {
                let m = scalar(&(eps.detach() - &c.noise[k])?.sqr()?.mean_all()?)?;
                sums[k] += m * chunk.len() as f64;
            }
        }
        Ok(sums.into_iter().map(|s| s / samples.len() as f64).collect())
    }
}

const VALIDATION_SALT: u64 = 0x7a11_da7e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub val_total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Line-delimited [`LossReport`]s.
    pub metrics: Option<PathBuf>,
    /// Line-delimited [`EpochSummary`]s.
    pub validation: Option<PathBuf>,
    /// Overwritten whenever validation loss improves; written once when
    /// there are no epochs.
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: Option<usize>,
    /// Per-modality training loss before the first update, on the first
    /// training batch.
    pub initial_mse: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_line<T: Serialize>(w: &mut Option<(BufWriter<File>, PathBuf)>, record: &T) -> Result<()> {
    if let Some((w, path)) = w {
        let line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Epoch loop over a shuffled training split with a validation pass after
/// each epoch. All randomness derives from `cfg.seed`.
pub fn train(trainer: &mut Trainer, train: &[PairedSample], val: &[PairedSample], out: &TrainOutputs) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let mut outcome = TrainOutcome::default();
    let open = |p: &Option<PathBuf>| -> Result<Option<(BufWriter<File>, PathBuf)>> {
        p.as_ref().map(|p| Ok((create(p)?, p.clone()))).transpose()
    };
    let mut metrics = open(&out.metrics)?;
    let mut validation = open(&out.validation)?;
    if trainer.cfg.epochs == 0 {
        if let Some(p) = &out.best_checkpoint {
            trainer.models.save(p, "untrained")?;
        }
        return Ok(outcome);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    for epoch in 0..trainer.cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; trainer.models.len()];
        let mut batches = 0usize;
        for idx in order.chunks(trainer.cfg.batch_size) {
            let batch: Vec<PairedSample> = match &trainer.cfg.augment {
                Some(a) => idx.iter().map(|&i| augment(&train[i], a, &mut rng)).collect(),
                None => idx.iter().map(|&i| train[i].clone()).collect(),
            };
            let report = trainer.training_step(&batch, epoch, &mut rng)?;
            if outcome.initial_mse.is_empty() {
                outcome.initial_mse = report.mse.clone();
            }
            for (s, m) in sums.iter_mut().zip(&report.mse) {
                *s += m;
            }
            batches += 1;
            write_line(&mut metrics, &report)?;
        }
        let val_mse = trainer.validation_loss(val)?;
        let val_total: f64 = val_mse.iter().sum();
        let summary = EpochSummary {
            epoch,
            train_mse: sums.into_iter().map(|s| s / batches as f64).collect(),
            val_mse,
            val_total,
        };
        write_line(&mut validation, &summary)?;
        if val_total < best {
            best = val_total;
            outcome.best_epoch = Some(epoch);
            if let Some(p) = &out.best_checkpoint {
                trainer.models.save(p, &format!("best at epoch {epoch}"))?;
            }
        }
        outcome.epochs.push(summary);
    }
    for (w, path) in [metrics, validation].into_iter().flatten() {
        let mut w = w;
        w.flush().map_err(|source| Error::Io { path, source })?;
    }
    Ok(outcome)
}

//! Tiny encoder-decoder segmenter used to score datasets by downstream Dice.

use candle_core::{DType, Device, Module, Tensor};
use pairdiff_core::data::{Modality, PairedSample};
use pairdiff_core::stats::dice;
use pairdiff_core::Image;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model_set::tensor_to_images;
use crate::optim::{NetOptimizer, OptimizerKind};
use crate::params::{Conv, Init, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub base_channels: usize,
    /// Input channels, in order; the target is always the mask.
    pub inputs: Vec<Modality>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            inputs: vec![Modality::Anatomy, Modality::Functional],
            pretrain_epochs: 5,
            finetune_epochs: 10,
            batch_size: 8,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::param("segmenter", "channels and batch size must be positive"));
        }
        if self.inputs.is_empty() || self.inputs.contains(&Modality::Mask) {
            return Err(Error::param("inputs", "need at least one non-mask input"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Two-level U-shaped net producing mask logits.
#[derive(Debug)]
pub struct Segmenter {
    store: ParamStore,
    inputs: Vec<Modality>,
    c1: Conv,
    c2: Conv,
    down: Conv,
    mid: Conv,
    up: Conv,
    dec: Conv,
    out: Conv,
}

impl Segmenter {
    pub fn new(cfg: &SegmenterConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let c = cfg.base_channels;
        let mut p = store.scope("seg");
        let c1 = Conv::new(&mut p.scope("c1"), cfg.inputs.len(), c, 3, 1)?;
        let c2 = Conv::new(&mut p.scope("c2"), c, c, 3, 1)?;
        let down = Conv::new(&mut p.scope("down"), c, 2 * c, 3, 2)?;
        let mid = Conv::new(&mut p.scope("mid"), 2 * c, 2 * c, 3, 1)?;
        let up = Conv::new(&mut p.scope("up"), 2 * c, c, 3, 1)?;
        let dec = Conv::new(&mut p.scope("dec"), 2 * c, c, 3, 1)?;
        let out = Conv::with_init(&mut p.scope("out"), c, 1, 1, 1, Init::Normal(0.01))?;
        Ok(Self {
            store,
            inputs: cfg.inputs.clone(),
            c1,
            c2,
            down,
            mid,
            up,
            dec,
            out,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::param("x", format!("{h}x{w} must be even")));
        }
        let s = self.c2.forward(&self.c1.forward(x)?.relu()?)?.relu()?;
        let m = self.mid.forward(&self.down.forward(&s)?.relu()?)?.relu()?;
        let u = self.up.forward(&m.upsample_nearest2d(h, w)?)?.relu()?;
        let d = self.dec.forward(&Tensor::cat(&[&u, &s], 1)?)?.relu()?;
        Ok(self.out.forward(&d)?)
    }

    /// `(input, target)` tensors in raw `[0, 1]` intensities.
    pub fn batch(&self, samples: &[PairedSample]) -> Result<(Tensor, Tensor)> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = first.shape();
        let dtype = self.store.dtype();
        let mut x = Vec::with_capacity(samples.len() * self.inputs.len() * h * w);
        let mut y = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            for &m in &self.inputs {
                let img = s
                    .get(m)
                    .ok_or_else(|| Error::Data(format!("{} lacks {}", s.id, m.name())))?;
                x.extend(img.iter().copied());
            }
            let mask = s.mask().ok_or_else(|| Error::Data(format!("{} lacks a mask", s.id)))?;
            y.extend(mask.iter().copied());
        }
        let n = samples.len();
        let x = Tensor::from_vec(x, (n, self.inputs.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?;
        let y = Tensor::from_vec(y, (n, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((x, y))
    }

    /// Binary masks thresholded at probability 0.5.
    pub fn predict(&self, samples: &[PairedSample]) -> Result<Vec<Image>> {
        let (x, _) = self.batch(samples)?;
        let logits = tensor_to_images(&self.logits(&x)?)?;
        Ok(logits.into_iter().map(|l| l.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })).collect())
    }
}

/// Numerically stable mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(l.mean_all()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn mean_loss(seg: &Segmenter, samples: &[PairedSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(batch_size) {
        let (x, y) = seg.batch(chunk)?;
        sum += scalar(&bce_with_logits(&seg.logits(&x)?, &y)?)? * chunk.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub dice: f64,
}

pub fn score_cases(seg: &Segmenter, samples: &[PairedSample], batch_size: usize) -> Result<Vec<CaseDice>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        for (s, pred) in chunk.iter().zip(seg.predict(chunk)?) {
            let truth = s.mask().ok_or_else(|| Error::Data(format!("{} lacks a mask", s.id)))?;
            out.push(CaseDice {
                case_id: s.id.clone(),
                dice: dice(&pred, truth)?,
            });
        }
    }
    Ok(out)
}

/// Runs `epochs` shuffled passes; returns the validation loss after each.
pub fn fit(
    seg: &Segmenter,
    opt: &mut NetOptimizer,
    train: &[PairedSample],
    val: &[PairedSample],
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if epochs > 0 && train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        for idx in order.chunks(batch_size) {
            let batch: Vec<PairedSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let (x, y) = seg.batch(&batch)?;
            let loss = bce_with_logits(&seg.logits(&x)?, &y)?;
            opt.step(&loss.backward()?)?;
        }
        curve.push(mean_loss(seg, val, batch_size)?);
    }
    Ok(curve)
}

/// Trained segmenter plus its fine-tuning validation curve. `val_curve[0]`
/// is the loss before fine-tuning.
#[derive(Debug)]
pub struct SegmenterRun {
    pub segmenter: Segmenter,
    pub pretrain_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub test_dice: Vec<CaseDice>,
}

/// Optional pretraining, then fine-tuning, then per-case test Dice.
pub fn train_segmenter(
    pretrain: Option<&[PairedSample]>,
    finetune: &[PairedSample],
    val: &[PairedSample],
    test: &[PairedSample],
    cfg: &SegmenterConfig,
    seed: u64,
) -> Result<SegmenterRun> {
    if val.is_empty() || test.is_empty() {
        return Err(Error::Data("segmenter needs validation and test cases".into()));
    }
    let seg = Segmenter::new(cfg, seed, DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9);
    let mut opt = NetOptimizer::new(cfg.optimizer, seg.store().all_vars(), cfg.learning_rate)?;
    let pretrain_curve = match pretrain {
        Some(corpus) => {
            if corpus.is_empty() {
                return Err(Error::Data("empty pretraining corpus".into()));
            }
            let c = fit(&seg, &mut opt, corpus, val, cfg.pretrain_epochs, cfg.batch_size, &mut rng)?;
            // fresh optimizer state for the new task
            opt = NetOptimizer::new(cfg.optimizer, seg.store().all_vars(), cfg.learning_rate)?;
            c
        }
        None => Vec::new(),
    };
    let mut val_curve = vec![mean_loss(&seg, val, cfg.batch_size)?];
    val_curve.extend(fit(&seg, &mut opt, finetune, val, cfg.finetune_epochs, cfg.batch_size, &mut rng)?);
    let test_dice = score_cases(&seg, test, cfg.batch_size)?;
    Ok(SegmenterRun {
        segmenter: seg,
        pretrain_curve,
        val_curve,
        test_dice,
    })
}

/// First epoch whose validation loss is at or below `tau`.
pub fn epochs_to_threshold(curve: &[f64], tau: f64) -> Option<usize> {
    curve.iter().position(|&l| l <= tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pairdiff_core::data::{generate_phantoms, PhantomConfig};

    fn data(n: usize, seed: u64) -> Vec<PairedSample> {
        let cfg = PhantomConfig {
            image_size: 16,
            tumour_radius: (1.0, 1.5),
            seed,
            ..Default::default()
        };
        generate_phantoms(&cfg, n).unwrap()
    }

    #[test]
    fn stable_bce_matches_direct_formula() {
        let x = Tensor::new(&[-3.0f64, -0.5, 0.0, 0.7, 4.0], &Device::Cpu).unwrap();
        let y = Tensor::new(&[0.0f64, 1.0, 1.0, 0.0, 1.0], &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits(&x, &y).unwrap()).unwrap();
        let xs = [-3.0f64, -0.5, 0.0, 0.7, 4.0];
        let ys = [0.0f64, 1.0, 1.0, 0.0, 1.0];
        let want: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 5.0;
        assert!((got - want).abs() < 1e-12);
        let big = Tensor::new(&[200.0f64, -200.0], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.0f64, 1.0], &Device::Cpu).unwrap();
        assert!((scalar(&bce_with_logits(&big, &t).unwrap()).unwrap() - 200.0).abs() < 1e-9);
    }

    #[test]
    fn untrained_dice_in_range_and_repeatable() {
        let d = data(12, 1);
        let cfg = SegmenterConfig {
            finetune_epochs: 0,
            ..Default::default()
        };
        let a = train_segmenter(None, &d[..8], &d[8..10], &d[10..], &cfg, 3).unwrap();
        assert_eq!(a.val_curve.len(), 1);
        assert!(a.test_dice.iter().all(|c| (0.0..=1.0).contains(&c.dice)));
        let b = train_segmenter(None, &d[..8], &d[8..10], &d[10..], &cfg, 3).unwrap();
        assert_eq!(a.test_dice, b.test_dice);
    }

    #[test]
    fn training_lowers_validation_loss() {
        let d = data(40, 2);
        let cfg = SegmenterConfig {
            finetune_epochs: 6,
            ..Default::default()
        };
        let run = train_segmenter(None, &d[..30], &d[30..35], &d[35..], &cfg, 0).unwrap();
        assert!(run.val_curve.last().unwrap() < &run.val_curve[0]);
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let mut d = data(4, 1);
        for s in &mut d {
            s.images.truncate(2);
            s.modalities.truncate(2);
        }
        let cfg = SegmenterConfig::default();
        assert!(matches!(train_segmenter(None, &d, &d, &d, &cfg, 0), Err(Error::Data(_))));
        assert!(matches!(train_segmenter(None, &d, &[], &d, &cfg, 0), Err(Error::Data(_))));
    }

    #[test]
    fn threshold_epoch() {
        assert_eq!(epochs_to_threshold(&[0.9, 0.5, 0.3, 0.2], 0.3), Some(2));
        assert_eq!(epochs_to_threshold(&[0.9], 0.3), None);
    }
}

use candle_core::{DType, Device, Tensor};
use pairdiff_core::data::{generate_phantoms, PairedSample, PhantomConfig};
use pairdiff_core::diffusion::NoiseSchedule;
use pairdiff_nets::denoiser::{embedding_tensor, Conditioning, DenoiserConfig};
use pairdiff_nets::model_set::{images_to_tensor, CoupledModelSet};
use pairdiff_nets::optim::OptimizerKind;
use pairdiff_nets::segmenter::{epochs_to_threshold, train_segmenter, SegmenterConfig};
use pairdiff_nets::trainer::{train, TrainConfig, TrainOutputs, Trainer};

fn phantoms(count: usize, seed: u64, noise: f64) -> Vec<PairedSample> {
    let cfg = PhantomConfig {
        image_size: 16,
        tumour_radius: (1.0, 1.5),
        noise,
        seed,
        ..Default::default()
    };
    generate_phantoms(&cfg, count).unwrap()
}

fn tiny_set(conditioning: Conditioning) -> CoupledModelSet {
    let cfg = DenoiserConfig {
        base_channels: 4,
        depth: 2,
        modality_count: 3,
        image_size: 16,
        embed_dim: 8,
    };
    let schedule = NoiseSchedule::linear(50, 2e-3, 0.4).unwrap();
    CoupledModelSet::new(&cfg, schedule, conditioning, 3, DType::F32).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 2e-3,
        optimizer: OptimizerKind::Adam,
        perceptual_gate_epoch: 20,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn toy_training_lowers_every_noise_loss() {
    let data = phantoms(40, 1, 0.02);
    let mut tr = Trainer::new(tiny_set(Conditioning::Coupled), quick(30)).unwrap();
    let o = train(&mut tr, &data[..32], &data[32..], &TrainOutputs::default()).unwrap();
    assert_eq!(o.epochs.len(), 30);
    let last = &o.epochs.last().unwrap().train_mse;
    for (k, (a, b)) in o.initial_mse.iter().zip(last).enumerate() {
        assert!(b < a, "modality {k}: {a} -> {b}");
    }
    let first_val = o.epochs[0].val_mse.iter().sum::<f64>();
    let best_val = o.epochs.iter().map(|e| e.val_mse.iter().sum::<f64>()).fold(f64::INFINITY, f64::min);
    assert!(best_val < first_val);
}

#[test]
fn severing_changes_trained_predictions() {
    let data = phantoms(24, 2, 0.02);
    let mut tr = Trainer::new(tiny_set(Conditioning::Coupled), quick(3)).unwrap();
    train(&mut tr, &data[..16], &data[16..], &TrainOutputs::default()).unwrap();
    let x: Vec<Tensor> = (0..3)
        .map(|k| {
            let imgs: Vec<_> = data[..4].iter().map(|s| s.to_model_range()[k].clone()).collect();
            images_to_tensor(&imgs, DType::F32).unwrap()
        })
        .collect();
    let emb = embedding_tensor(&[10, 20, 30, 40], 8, DType::F32, &Device::Cpu).unwrap();
    let net = &tr.models.networks()[0];
    let coupled = net.forward(&x[0], &x[1..], &emb, Conditioning::Coupled).unwrap();
    let severed = net.forward(&x[0], &x[1..], &emb, Conditioning::Severed).unwrap();
    let gap = (coupled - severed).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(gap > 1e-4, "gap {gap}");
}

/// Pretraining on a large auxiliary corpus reaches the control's best
/// validation loss in fewer fine-tuning epochs.
#[test]
fn pretrained_segmenters_converge_sooner() {
    let target = phantoms(8, 10, 0.02);
    let val = phantoms(16, 11, 0.02);
    let test = phantoms(8, 12, 0.02);
    // stand-in for generated pairs: a larger corpus from a shifted generator
    let synthetic = phantoms(160, 13, 0.05);
    let cfg = SegmenterConfig {
        base_channels: 4,
        pretrain_epochs: 4,
        finetune_epochs: 12,
        ..Default::default()
    };
    let mut wins = 0;
    for seed in 0..5 {
        let control = train_segmenter(None, &target, &val, &test, &cfg, seed).unwrap();
        let pre = train_segmenter(Some(&synthetic), &target, &val, &test, &cfg, seed).unwrap();
        let tau = control.val_curve.iter().copied().fold(f64::INFINITY, f64::min);
        let c = epochs_to_threshold(&control.val_curve, tau).unwrap();
        if let Some(p) = epochs_to_threshold(&pre.val_curve, tau) {
            if p < c {
                wins += 1;
            }
        }
    }
    assert!(wins >= 4, "pretraining won {wins} of 5 seeds");
}

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pairdiff_core::data::io::{read_dataset, save_grid, write_dataset, Manifest};
use pairdiff_core::data::{from_model_range, generate_phantoms, split_indices, Modality, PairedSample, SourceTag};
use pairdiff_core::sampler::{generate, GenerationRecord, SeedSource};
use pairdiff_core::spectral::build_mask;
use pairdiff_core::stats::StatsReport;
use pairdiff_core::Image;
use pairdiff_nets::experiment::{run_experiment_suite, scores_from_records, BaseDatasets, CaseRecord, ExperimentArm};
use pairdiff_nets::model_set::CoupledModelSet;
use pairdiff_nets::trainer::{train as run_training, TrainOutputs, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Category;
use crate::run_dir::require;

pub const DATASET_DIR: &str = "dataset";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Every sample of a dataset directory, split order.
fn all_samples(dir: &Path) -> Result<Vec<PairedSample>> {
    let d = read_dataset(dir)
        .with_context(|| format!("reading dataset {}", dir.display()))
        .context(Category::Resolution)?;
    Ok(d.train.into_iter().chain(d.val).chain(d.test).collect())
}

/// Phantom dataset with an 80:10:10 manifest under `<run>/dataset`.
pub fn gen_data(cfg: &RunConfig, run: &Path) -> Result<PathBuf> {
    if cfg.data.count == 0 {
        bail!(anyhow::anyhow!("data.count must be at least 1").context(Category::Validation));
    }
    let samples = generate_phantoms(&cfg.data.phantom, cfg.data.count)?;
    let idx = split_indices(samples.len(), cfg.data.split, cfg.seed)?;
    let dir = run.join(DATASET_DIR);
    write_dataset(&dir, &samples, &Manifest::from_indices(&samples, &idx))?;
    println!(
        "wrote {} phantoms ({} train / {} val / {} test) to {}",
        samples.len(),
        idx.train.len(),
        idx.val.len(),
        idx.test.len(),
        dir.display()
    );
    Ok(dir)
}

/// Trains a coupled set; returns the best checkpoint path.
pub fn train(cfg: &RunConfig, run: &Path) -> Result<PathBuf> {
    let t = &cfg.train;
    let dir = require(t.dataset.as_deref(), "dataset")?;
    let data = read_dataset(&dir)
        .with_context(|| format!("reading dataset {}", dir.display()))
        .context(Category::Resolution)?;
    if let Some(s) = data.train.first() {
        if s.images.len() != t.model.modality_count || s.shape() != (t.model.image_size, t.model.image_size) {
            bail!(anyhow::anyhow!(
                "dataset samples are {} x {:?}, model expects {} x {}x{}",
                s.images.len(),
                s.shape(),
                t.model.modality_count,
                t.model.image_size,
                t.model.image_size
            )
            .context(Category::Validation));
        }
    }
    let schedule = t.schedule.build()?;
    let set = CoupledModelSet::new(&t.model, schedule, t.conditioning, cfg.seed, t.precision.dtype())?;
    println!("training {} networks, {} parameters", set.len(), set.param_count());
    let mut trainer = Trainer::new(set, t.optim.clone())?;
    let out = TrainOutputs {
        metrics: Some(run.join("metrics.jsonl")),
        validation: Some(run.join("validation.jsonl")),
        best_checkpoint: Some(run.join(BEST_CHECKPOINT)),
    };
    let outcome = run_training(&mut trainer, &data.train, &data.val, &out)?;
    trainer.models.save(&run.join(FINAL_CHECKPOINT), "final")?;
    for e in &outcome.epochs {
        println!("epoch {:>4}  val {:.5}", e.epoch, e.val_total);
    }
    write_json(
        &run.join("summary.json"),
        &serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "epochs": outcome.epochs,
            "initial_mse": outcome.initial_mse,
        }),
    )?;
    Ok(run.join(BEST_CHECKPOINT))
}

/// Raw-intensity row for display: masks binarized, other modalities mapped
/// back to `[0, 1]`.
pub fn display_row(images: &[Image], modalities: &[Modality]) -> Vec<Image> {
    images
        .iter()
        .zip(modalities)
        .map(|(img, m)| match m {
            Modality::Mask => img.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            _ => from_model_range(img),
        })
        .collect()
}

fn load_checkpoint(path: Option<&Path>) -> Result<CoupledModelSet> {
    let ckpt = require(path, "checkpoint")?;
    let (set, _) = CoupledModelSet::load(&ckpt, candle_core::DType::F32)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(set)
}

/// Generation records, one PNG grid per sample and the generated pairs as
/// a dataset.
pub fn sample(cfg: &RunConfig, run: &Path) -> Result<Vec<GenerationRecord>> {
    let set = load_checkpoint(cfg.sample.checkpoint.as_deref())?;
    let size = set.config().image_size;
    let request = cfg.sample.request.clone();
    if (request.height, request.width) != (size, size) {
        bail!(anyhow::anyhow!(
            "sample.request is {}x{} but the checkpoint generates {size}x{size}",
            request.height,
            request.width
        )
        .context(Category::Validation));
    }
    request.validate(&set.schedule)?;
    let sources: Vec<SeedSource> = match request.seed_fraction {
        Some(_) => {
            let dir = require(cfg.sample.dataset.as_deref(), "seed dataset")?;
            let d = read_dataset(&dir)
                .with_context(|| format!("reading dataset {}", dir.display()))
                .context(Category::Resolution)?;
            let pool = if d.test.is_empty() { d.train } else { d.test };
            pool.iter()
                .map(|s| SeedSource {
                    id: s.id.clone(),
                    images: s.to_model_range(),
                })
                .collect()
        }
        None => Vec::new(),
    };
    let records = generate(&set, &request, &sources, &set.schedule)?;
    let modalities = Modality::ALL[..set.len()].to_vec();
    let tag = if request.seed_fraction.is_some() {
        SourceTag::SeededSynthetic
    } else {
        SourceTag::Synthetic
    };
    let mut generated = Vec::with_capacity(records.len());
    for r in &records {
        let i = r.provenance.index;
        save_grid(&[display_row(&r.images, &modalities)], &run.join(format!("sample-{i:04}.png")), 1)?;
        generated.push(PairedSample::from_model_range(format!("synthetic-{i:05}"), modalities.clone(), &r.images, tag)?);
    }
    write_jsonl(&run.join("records.jsonl"), &records)?;
    write_dataset(&run.join(DATASET_DIR), &generated, &Manifest::unsplit(&generated))?;
    println!("generated {} samples in {}", records.len(), run.display());
    Ok(records)
}

pub fn read_case_records(path: &Path) -> Result<Vec<CaseRecord>> {
    let file = File::open(path)
        .with_context(|| format!("opening fixtures {}", path.display()))
        .context(Category::Resolution)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", path.display(), n + 1))
            .context(Category::Data)?;
        out.push(rec);
    }
    Ok(out)
}

/// Statistics over Dice records, either replayed from fixtures or produced
/// by training the configured arms.
pub fn eval(cfg: &RunConfig, run: &Path) -> Result<StatsReport> {
    let e = &cfg.eval;
    let records = match &e.fixtures {
        Some(p) => read_case_records(&require(Some(p), "fixtures")?)?,
        None => {
            let real_dir = require(e.real.as_deref(), "real dataset")?;
            let real = read_dataset(&real_dir)
                .with_context(|| format!("reading dataset {}", real_dir.display()))
                .context(Category::Resolution)?;
            let optional = |p: &Option<PathBuf>, what: &str| -> Result<Vec<PairedSample>> {
                match p {
                    Some(p) => all_samples(&require(Some(p), what)?),
                    None => Ok(Vec::new()),
                }
            };
            let data = BaseDatasets {
                target: real.train.iter().take(e.target_count).cloned().collect(),
                real: real.train.clone(),
                synthetic: optional(&e.synthetic, "synthetic dataset")?,
                seeded: optional(&e.seeded, "seeded dataset")?,
                val: real.val,
                test: real.test,
            };
            let arms: Vec<ExperimentArm> = e.arms.iter().map(|&a| ExperimentArm::new(a, e.seeds.clone())).collect();
            let outcome = run_experiment_suite(&arms, &data, &e.segmenter)?;
            write_jsonl(&run.join("curves.jsonl"), &outcome
                .runs
                .iter()
                .map(|r| serde_json::json!({"arm": r.arm, "seed": r.seed, "val_curve": r.val_curve}))
                .collect::<Vec<_>>())?;
            outcome.records
        }
    };
    write_jsonl(&run.join("records.jsonl"), &records)?;
    let report = StatsReport::from_scores(scores_from_records(&records))?;
    write_json(&run.join("report.json"), &report)?;
    let table = report.render();
    std::fs::write(run.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

/// Centred copy of a DFT-ordered mask, for display.
fn fftshift(m: &Image) -> Image {
    let (h, w) = m.dim();
    Image::from_shape_fn((h, w), |(y, x)| m[[(y + h / 2) % h, (x + w / 2) % w]])
}

/// Filter heatmaps per conditional path across the schedule, and x0
/// preview strips from a short sampling run.
pub fn inspect(cfg: &RunConfig, run: &Path) -> Result<()> {
    let set = load_checkpoint(cfg.inspect.checkpoint.as_deref())?;
    let size = set.config().image_size;
    let snapshots = set.filter_snapshots()?;
    write_json(&run.join("filters.json"), &snapshots)?;
    let mut rows: Vec<Vec<Image>> = Vec::new();
    for s in &snapshots {
        let key = s.network * set.len() + s.condition;
        if rows.len() <= key {
            rows.resize(key + 1, Vec::new());
        }
        rows[key].push(fftshift(&build_mask(size, size, s.params)?));
    }
    rows.retain(|r| !r.is_empty());
    if !rows.is_empty() {
        save_grid(&rows, &run.join("filters.png"), 1)?;
    }

    let every = match cfg.inspect.preview_every {
        0 => (set.schedule.steps() / 10).max(1),
        n => n,
    };
    let mut request = cfg.sample.request.clone();
    request.count = cfg.inspect.count.max(1);
    request.seed_fraction = None;
    request.preview_every = every;
    request.height = size;
    request.width = size;
    let records = generate(&set, &request, &[], &set.schedule)?;
    let modalities = Modality::ALL[..set.len()].to_vec();
    for r in &records {
        let rows: Vec<Vec<Image>> = (0..set.len())
            .map(|k| {
                r.previews
                    .iter()
                    .map(|p| display_row(&p.x0[k..k + 1], &modalities[k..k + 1]).remove(0))
                    .collect()
            })
            .collect();
        if rows.iter().all(|r| !r.is_empty()) {
            save_grid(&rows, &run.join(format!("previews-{:04}.png", r.provenance.index)), 1)?;
        }
    }
    println!("wrote {} filter snapshots and {} preview strips to {}", snapshots.len(), records.len(), run.display());
    Ok(())
}

//! Coupled reverse diffusion over `n` modality chains.
//!
//! Every timestep has a read phase, where each chain's noise is predicted
//! from the current states of all chains, followed by a write phase that
//! advances every chain. No chain sees another chain's updated state within
//! the same step.
//!
//! Each sample owns a ChaCha stream (`seed`, stream = sample index), so a
//! sample can be replayed alone from its [`Provenance`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    estimate_x0, forward_diffuse, generalized_step, posterior_step, sample_offset_noise,
    NoiseSchedule, ScheduleSpec, SigmaMode, DEFAULT_OFFSET_WEIGHT,
};
use crate::{Error, Image, Result};

/// Default seeding depth, the middle of the 80-90% band.
pub const DEFAULT_SEED_FRACTION: f64 = 0.85;

/// Noise predictor for a coupled set of modality chains.
pub trait CoupledEps {
    fn modality_count(&self) -> usize;

    /// Predicts noise for chain `k` over a batch. `conditions` holds the
    /// other chains' batches in modality order with `k` left out.
    fn predict(&self, k: usize, x_t: &[Image], conditions: &[&[Image]], t: usize) -> Result<Vec<Image>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Ancestral,
    Strided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRequest {
    pub count: usize,
    pub mode: SampleMode,
    /// Step stride for [`SampleMode::Strided`].
    pub stride: usize,
    /// Start from real images noised to this fraction of the schedule.
    pub seed_fraction: Option<f64>,
    pub seed: u64,
    /// Stream index of the first sample; later samples use consecutive streams.
    pub first_index: u64,
    pub offset_weight: f64,
    pub sigma_mode: SigmaMode,
    /// Ancestral stochasticity. `1.0` runs the DDPM posterior step; other
    /// values use the generalized step, `0.0` being deterministic.
    pub eta: f64,
    /// Record x0 previews every this many steps (0 disables).
    pub preview_every: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            count: 1,
            mode: SampleMode::Ancestral,
            stride: 1,
            seed_fraction: None,
            seed: 0,
            first_index: 0,
            offset_weight: DEFAULT_OFFSET_WEIGHT,
            sigma_mode: SigmaMode::BetaTilde,
            eta: 1.0,
            preview_every: 0,
            height: 32,
            width: 32,
        }
    }
}

impl SampleRequest {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.count == 0 {
            return Err(Error::param("count", "must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::param("shape", "empty image shape"));
        }
        if self.mode == SampleMode::Strided {
            if self.stride == 0 {
                return Err(Error::param("stride", "must be at least 1"));
            }
            if self.stride > schedule.steps() {
                return Err(Error::param(
                    "stride",
                    format!("{} exceeds schedule length {}", self.stride, schedule.steps()),
                ));
            }
        }
        if let Some(f) = self.seed_fraction {
            schedule.step_at_fraction(f)?;
        }
        if !(self.eta >= 0.0) {
            return Err(Error::param("eta", "must be >= 0"));
        }
        Ok(())
    }
}

/// Real images (model value range) used to seed the chains.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSource {
    pub id: String,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: SampleMode,
    pub stride: usize,
    pub eta: f64,
    pub sigma_mode: SigmaMode,
    pub seed_fraction: Option<f64>,
    pub source_id: Option<String>,
    pub seed: u64,
    pub index: u64,
    pub offset_weight: f64,
    pub schedule: ScheduleSpec,
    pub height: usize,
    pub width: usize,
}

impl Provenance {
    /// Single-sample request reproducing this record.
    pub fn request(&self) -> SampleRequest {
        SampleRequest {
            count: 1,
            mode: self.mode,
            stride: self.stride,
            seed_fraction: self.seed_fraction,
            seed: self.seed,
            first_index: self.index,
            offset_weight: self.offset_weight,
            sigma_mode: self.sigma_mode,
            eta: self.eta,
            preview_every: 0,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub t: usize,
    pub x0: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Final image per modality, model value range.
    pub images: Vec<Image>,
    pub provenance: Provenance,
    pub previews: Vec<Preview>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Chains {
    /// `states[k][i]`: chain `k` (modality) of sample `i`.
    states: Vec<Vec<Image>>,
    rngs: Vec<ChaCha8Rng>,
    source_ids: Vec<Option<String>>,
    start: usize,
}

/// Initial chain states: offset noise for unseeded requests, real sources
/// noised to `round(f T)` otherwise.
fn initialize(
    n: usize,
    request: &SampleRequest,
    sources: &[SeedSource],
    schedule: &NoiseSchedule,
) -> Result<Chains> {
    request.validate(schedule)?;
    let shape = (request.height, request.width);
    let seed_step = match request.seed_fraction {
        Some(f) => {
            if sources.is_empty() {
                return Err(Error::param("source", "seed_fraction requires at least one source"));
            }
            for s in sources {
                if s.images.len() != n {
                    return Err(Error::Arity {
                        what: "source modalities",
                        expected: n,
                        actual: s.images.len(),
                    });
                }
                if let Some(img) = s.images.iter().find(|i| i.dim() != shape) {
                    return Err(Error::shape(&[shape.0, shape.1], img.shape()));
                }
            }
            Some(schedule.step_at_fraction(f)?)
        }
        None => None,
    };
    let mut states = vec![Vec::with_capacity(request.count); n];
    let mut rngs = Vec::with_capacity(request.count);
    let mut source_ids = Vec::with_capacity(request.count);
    for i in 0..request.count {
        let mut rng = sample_rng(request.seed, request.first_index + i as u64);
        let source = seed_step.map(|_| &sources[i % sources.len()]);
        for (k, chain) in states.iter_mut().enumerate() {
            let noise = sample_offset_noise(shape, request.offset_weight, &mut rng)?;
            let x = match (source, seed_step) {
                (Some(src), Some(t)) => forward_diffuse(&src.images[k], t, &noise, schedule)?,
                _ => noise.values,
            };
            chain.push(x);
        }
        rngs.push(rng);
        source_ids.push(source.map(|s| s.id.clone()));
    }
    Ok(Chains {
        states,
        rngs,
        source_ids,
        start: seed_step.unwrap_or(schedule.steps()),
    })
}

/// Initial chain states as they would enter the reverse loop.
pub fn initial_states(
    n: usize,
    request: &SampleRequest,
    sources: &[SeedSource],
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<Image>>> {
    Ok(initialize(n, request, sources, schedule)?.states)
}

fn predict_all<M: CoupledEps + ?Sized>(
    models: &M,
    states: &[Vec<Image>],
    t: usize,
) -> Result<Vec<Vec<Image>>> {
    let n = states.len();
    (0..n)
        .map(|k| {
            let conds: Vec<&[Image]> = (0..n).filter(|&j| j != k).map(|j| states[j].as_slice()).collect();
            let eps = models.predict(k, &states[k], &conds, t)?;
            if eps.len() != states[k].len() {
                return Err(Error::Arity {
                    what: "noise predictions",
                    expected: states[k].len(),
                    actual: eps.len(),
                });
            }
            Ok(eps)
        })
        .collect()
}

/// Visited steps for a strided run: `start, start - S, ...`, ending at 0.
pub fn strided_steps(start: usize, stride: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (1..=start).rev().step_by(stride.max(1)).collect();
    steps.push(0);
    steps
}

fn run<M: CoupledEps + ?Sized>(
    models: &M,
    request: &SampleRequest,
    sources: &[SeedSource],
    schedule: &NoiseSchedule,
) -> Result<Vec<GenerationRecord>> {
    let n = models.modality_count();
    if n == 0 {
        return Err(Error::param("models", "empty model set"));
    }
    let Chains {
        mut states,
        mut rngs,
        source_ids,
        start,
    } = initialize(n, request, sources, schedule)?;
    let count = request.count;
    let mut previews: Vec<Vec<Preview>> = vec![Vec::new(); count];

    let visited: Vec<usize> = match request.mode {
        SampleMode::Ancestral => {
            let mut v: Vec<usize> = (0..=start).rev().collect();
            if v.is_empty() {
                v.push(0);
            }
            v
        }
        SampleMode::Strided => strided_steps(start, request.stride),
    };

    for pair in visited.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        // read phase
        let eps = predict_all(models, &states, t)?;
        if request.preview_every > 0 && t % request.preview_every == 0 {
            for (i, p) in previews.iter_mut().enumerate() {
                let x0 = (0..n)
                    .map(|k| estimate_x0(&states[k][i], &eps[k][i], t, schedule))
                    .collect::<Result<Vec<_>>>()?;
                p.push(Preview { t, x0 });
            }
        }
        // write phase
        for (i, rng) in rngs.iter_mut().enumerate() {
            for k in 0..n {
                let x = &states[k][i];
                let e = &eps[k][i];
                let next = match request.mode {
                    SampleMode::Ancestral if request.eta == 1.0 => {
                        posterior_step(x, e, t, schedule, rng, request.sigma_mode)?
                    }
                    SampleMode::Ancestral => {
                        generalized_step(x, e, t, t_next, request.eta, true, schedule, rng)?
                    }
                    SampleMode::Strided => {
                        let x0 = estimate_x0(x, e, t, schedule)?;
                        let ab = schedule.alpha_bar(t_next)?;
                        let (s, d) = (ab.sqrt(), (1.0 - ab).sqrt());
                        ndarray::Zip::from(&x0).and(e).map_collect(|&a, &b| s * a + d * b)
                    }
                };
                states[k][i] = next;
            }
        }
    }

    let records = (0..count)
        .map(|i| GenerationRecord {
            images: (0..n).map(|k| states[k][i].clone()).collect(),
            provenance: Provenance {
                mode: request.mode,
                stride: if request.mode == SampleMode::Strided { request.stride } else { 1 },
                eta: request.eta,
                sigma_mode: request.sigma_mode,
                seed_fraction: request.seed_fraction,
                source_id: source_ids[i].clone(),
                seed: request.seed,
                index: request.first_index + i as u64,
                offset_weight: request.offset_weight,
                schedule: schedule.spec(),
                height: request.height,
                width: request.width,
            },
            previews: std::mem::take(&mut previews[i]),
        })
        .collect();
    Ok(records)
}

/// Unseeded ancestral sampling from offset-noise initial states.
pub fn coupled_ancestral_sample<M: CoupledEps + ?Sized>(
    models: &M,
    request: &SampleRequest,
    schedule: &NoiseSchedule,
) -> Result<Vec<GenerationRecord>> {
    if request.mode != SampleMode::Ancestral {
        return Err(Error::param("mode", "coupled_ancestral_sample requires ancestral mode"));
    }
    if request.seed_fraction.is_some() {
        return Err(Error::param("seed_fraction", "use seeded_sample for seeded requests"));
    }
    run(models, request, &[], schedule)
}

/// Sampling started from real sources noised to `round(f T)`. Sample `i`
/// uses `sources[i % len]`.
pub fn seeded_sample<M: CoupledEps + ?Sized>(
    models: &M,
    request: &SampleRequest,
    sources: &[SeedSource],
    schedule: &NoiseSchedule,
) -> Result<Vec<GenerationRecord>> {
    if request.seed_fraction.is_none() {
        return Err(Error::param("seed_fraction", "seeded_sample requires a seed fraction"));
    }
    run(models, request, sources, schedule)
}

/// Deterministic strided sampling; the last update lands at `t = 0`.
pub fn strided_sample<M: CoupledEps + ?Sized>(
    models: &M,
    request: &SampleRequest,
    schedule: &NoiseSchedule,
) -> Result<Vec<GenerationRecord>> {
    if request.mode != SampleMode::Strided {
        return Err(Error::param("mode", "strided_sample requires strided mode"));
    }
    run(models, request, &[], schedule)
}

/// Dispatches on mode and seeding.
pub fn generate<M: CoupledEps + ?Sized>(
    models: &M,
    request: &SampleRequest,
    sources: &[SeedSource],
    schedule: &NoiseSchedule,
) -> Result<Vec<GenerationRecord>> {
    run(models, request, sources, schedule)
}

/// Regenerates one record from its provenance. `source` must be the record's
/// seed source for seeded records.
pub fn replay<M: CoupledEps + ?Sized>(
    models: &M,
    provenance: &Provenance,
    source: Option<&SeedSource>,
    schedule: &NoiseSchedule,
) -> Result<GenerationRecord> {
    if provenance.schedule != schedule.spec() {
        return Err(Error::param("schedule", "provenance was recorded under another schedule"));
    }
    let sources: Vec<SeedSource> = source.into_iter().cloned().collect();
    let mut records = run(models, &provenance.request(), &sources, schedule)?;
    Ok(records.remove(0))
}

use candle_core::{DType, Device, Tensor, Var};
use pairdiff_nets::cbam::{GateInit, TimestepCbam};
use pairdiff_nets::denoiser::{embedding_tensor, Conditioning, Denoiser, DenoiserConfig};
use pairdiff_nets::gradcheck::check_gradients;
use pairdiff_nets::params::ParamStore;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn named(store: &ParamStore) -> Vec<(String, Var)> {
    store.vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

#[test]
fn cbam_gradients_match_finite_differences() {
    let mut store = ParamStore::new(4, DType::F64);
    let cbam = TimestepCbam::new(&mut store.scope("cbam"), 4, 6, GateInit::Random).unwrap();
    let x = Var::from_tensor(&randn(&[2, 4, 3, 3], 1)).unwrap();
    let t = randn(&[2, 6], 2);
    let weights = randn(&[2, 4, 3, 3], 3);
    let mut vars = named(&store);
    vars.push(("input".into(), x.clone()));
    let r = check_gradients(
        &vars,
        || Ok((cbam.forward(x.as_tensor(), &t)? * &weights)?.sum_all()?),
        8,
        STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < TOLERANCE, "{r:?}");
    assert!(r.checked > 40);
}

#[test]
fn denoiser_loss_gradients_match_finite_differences() {
    let cfg = DenoiserConfig {
        base_channels: 4,
        depth: 2,
        modality_count: 3,
        image_size: 8,
        embed_dim: 8,
    };
    let net = Denoiser::new(&cfg, 9, DType::F64).unwrap();
    let x = randn(&[2, 1, 8, 8], 10);
    let conds = vec![randn(&[2, 1, 8, 8], 11), randn(&[2, 1, 8, 8], 12)];
    let target = randn(&[2, 1, 8, 8], 13);
    let emb = embedding_tensor(&[40, 7], 8, DType::F64, &Device::Cpu).unwrap();
    let vars = named(net.store());
    let r = check_gradients(
        &vars,
        || {
            let eps = net.forward(&x, &conds, &emb, Conditioning::Coupled)?;
            Ok((eps - &target)?.sqr()?.mean_all()?)
        },
        3,
        STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < TOLERANCE, "{r:?}");
    // every parameter tensor, filters and gates included
    assert!(vars.iter().any(|(k, _)| k.contains("filter")));
    assert!(vars.iter().any(|(k, _)| k.contains("cbam")));
}

use ndarray::Array2;
use pairdiff_core::diffusion::{
    estimate_x0, estimate_x0_raw, forward_diffuse, forward_diffuse_with, sample_offset_noise, standard_normal_image,
    NoiseSchedule, IMAGE_RANGE,
};
use pairdiff_core::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_moments_match_the_closed_form() {
    let schedule = NoiseSchedule::default();
    let x0 = Array2::from_shape_fn((4, 4), |(y, x)| (y as f64 - x as f64) / 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 20_000;
    for t in [1, 250, 700, 1000] {
        let ab = schedule.alpha_bar(t).unwrap();
        let mut sum = Image::zeros((4, 4));
        let mut sq = Image::zeros((4, 4));
        for _ in 0..draws {
            let e = standard_normal_image((4, 4), &mut rng);
            let x = forward_diffuse_with(&x0, t, &e, &schedule).unwrap();
            sum += &x;
            sq += &x.mapv(|v| v * v);
        }
        let n = draws as f64;
        // 4.5 standard errors: 128 checks must not trip by chance
        let se = ((1.0 - ab) / n).sqrt();
        for ((y, x), &s) in sum.indexed_iter() {
            let m = s / n;
            let var = sq[[y, x]] / n - m * m;
            assert!((m - ab.sqrt() * x0[[y, x]]).abs() < 4.5 * se + 1e-12, "mean at t={t}");
            // standard error of a variance estimate is about var * sqrt(2 / n)
            assert!((var - (1.0 - ab)).abs() < 4.5 * (1.0 - ab) * (2.0 / n).sqrt() + 1e-12, "var at t={t}");
        }
    }
}

#[test]
fn offset_noise_covariance_law() {
    for w in [0.0, 0.1, 0.3] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40_000;
        let (mut s0, mut s1, mut s00, mut s01) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let f = sample_offset_noise((1, 2), w, &mut rng).unwrap();
            let (a, b) = (f.values[[0, 0]], f.values[[0, 1]]);
            s0 += a;
            s1 += b;
            s00 += a * a;
            s01 += a * b;
        }
        let n = n as f64;
        let var = s00 / n - (s0 / n).powi(2);
        let cov = s01 / n - (s0 / n) * (s1 / n);
        assert!((var - (1.0 + w * w)).abs() < 0.03, "w={w} var {var}");
        assert!((cov - w * w).abs() < 0.02, "w={w} cov {cov}");
    }
}

#[test]
fn inversion_is_exact_at_every_step() {
    let schedule = NoiseSchedule::linear(200, 5e-4, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = Array2::from_shape_fn((6, 6), |(y, x)| ((y * 6 + x) as f64 / 18.0) - 1.0);
    for t in 1..=schedule.steps() {
        let noise = sample_offset_noise((6, 6), 0.1, &mut rng).unwrap();
        let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
        let back = estimate_x0_raw(&x_t, &noise.values, t, &schedule).unwrap();
        let err = (&back - &x0).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-9, "t={t} err {err}");
    }
}

proptest! {
    #[test]
    fn schedules_are_monotone_with_fixed_endpoints(
        steps in 1usize..400,
        start in 1e-5f64..0.05,
        extra in 0.0f64..0.5,
    ) {
        let s = NoiseSchedule::linear(steps, start, start + extra).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), steps + 1);
        prop_assert_eq!(ab[0], 1.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        prop_assert_eq!(s.betas()[0], start);
        let end = if steps == 1 { start } else { start + extra };
        prop_assert!((s.betas()[steps - 1] - end).abs() < 1e-15);
    }

    #[test]
    fn clamped_estimates_stay_in_range(
        t in 1usize..=1000,
        xs in proptest::collection::vec(-5.0f64..5.0, 16),
        es in proptest::collection::vec(-5.0f64..5.0, 16),
    ) {
        let schedule = NoiseSchedule::default();
        let x = Array2::from_shape_vec((4, 4), xs).unwrap();
        let e = Array2::from_shape_vec((4, 4), es).unwrap();
        let out = estimate_x0(&x, &e, t, &schedule).unwrap();
        prop_assert!(out.iter().all(|v| (IMAGE_RANGE.0..=IMAGE_RANGE.1).contains(v)));
    }

    #[test]
    fn inversion_round_trips_any_image(
        t in 1usize..=1000,
        seed: u64,
        xs in proptest::collection::vec(-1.0f64..1.0, 64),
    ) {
        let schedule = NoiseSchedule::default();
        let x0 = Array2::from_shape_vec((8, 8), xs).unwrap();
        let noise = sample_offset_noise((8, 8), 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
        let back = estimate_x0_raw(&x_t, &noise.values, t, &schedule).unwrap();
        prop_assert!((&back - &x0).iter().all(|d| d.abs() < 1e-5));
    }
}

use proptest::prelude::*;
use rand::SeedableRng;
use rfsolve::harness::roundtrip;
use rfsolve::train::{rf_loss_batch, standard_normal, train, GaussianComponent, Optimizer, TrainConfig};
use rfsolve::{Direction, MlpField, SolverConfig, Tensor, TimeGrid, ToyDistribution, VelocityField};
use rfsolve_oracle::{fd_gradient, max_relative_error};

fn batch(dim: usize, n: usize, seed: u64) -> (Tensor, Tensor, Vec<f64>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x0 = standard_normal(&[n, dim], &mut rng).map(|x| 2.0 * x + 1.0);
    let x1 = standard_normal(&[n, dim], &mut rng);
    let t = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    (x0, x1, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reverse_mode_matches_central_differences(
        dim in 1usize..4,
        hidden in prop::collection::vec(1usize..6, 1..3),
        n in 1usize..5,
        seed in any::<u64>(),
    ) {
        let field = MlpField::new(dim, &hidden, seed).unwrap();
        let (x0, x1, t) = batch(dim, n, seed ^ 0x5eed);
        let (_, grads) = rf_loss_batch(&field, &x0, &x1, &t).unwrap();
        let mut probe = field.clone();
        let fd = fd_gradient(
            |p| {
                probe.set_params_flat(p);
                rf_loss_batch(&probe, &x0, &x1, &t).unwrap().0
            },
            &field.params_flat(),
            1e-5,
        );
        let err = max_relative_error(&grads.flat(), &fd, 1e-3);
        prop_assert!(err < 1e-4, "relative error {err}");
    }
}

fn single_gaussian() -> ToyDistribution {
    ToyDistribution::gaussian_mixture(vec![GaussianComponent {
        mean: vec![2.0, 2.0],
        std: vec![0.5, 0.5],
        weight: 1.0,
    }])
    .unwrap()
}

#[test]
fn learning_reduces_loss_on_single_gaussian() {
    let cfg = TrainConfig {
        steps: 2000,
        ..Default::default()
    };
    let out = train(MlpField::default_2d(0), &single_gaussian(), &cfg).unwrap();
    let first = out.losses[0];
    let last = *out.losses.last().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let init = MlpField::new(2, &[8], 4).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        learning_rate: 0.0,
        optimizer: Optimizer::Sgd,
        ..Default::default()
    };
    let out = train(init.clone(), &single_gaussian(), &cfg).unwrap();
    assert_eq!(out.field.params_flat(), init.params_flat());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        steps: 50,
        seed: 7,
        ..Default::default()
    };
    let dist = ToyDistribution::two_moons(0.05).unwrap();
    let a = train(MlpField::new(2, &[16, 16], 1).unwrap(), &dist, &cfg).unwrap();
    let b = train(MlpField::new(2, &[16, 16], 1).unwrap(), &dist, &cfg).unwrap();
    assert_eq!(a.field.params_flat(), b.field.params_flat());
    assert_eq!(a.losses, b.losses);
}

#[test]
fn trained_mixture_field_covers_both_modes() {
    let dist = ToyDistribution::gaussian_mixture(vec![
        GaussianComponent {
            mean: vec![-2.0, 0.0],
            std: vec![0.3, 0.3],
            weight: 0.5,
        },
        GaussianComponent {
            mean: vec![2.0, 0.0],
            std: vec![0.3, 0.3],
            weight: 0.5,
        },
    ])
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        ..Default::default()
    };
    let field = train(MlpField::default_2d(0), &dist, &cfg).unwrap().field;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let noise = standard_normal(&[400, 2], &mut rng);
    let grid = TimeGrid::uniform(25).unwrap();
    let cfg = SolverConfig::new(2, 0.01, Direction::Denoise).unwrap();
    let samples = rfsolve::solver::run_trajectory(&field, &noise, &grid, &cfg, None, false)
        .unwrap()
        .final_state;
    let xs: Vec<f64> = samples.data().chunks(2).map(|r| r[0]).collect();
    let left = xs.iter().filter(|&&x| x < -1.0).count();
    let right = xs.iter().filter(|&&x| x > 1.0).count();
    assert!(left > 120 && right > 120, "left {left}, right {right}");

    // Reconstruction through the trained field is far better at order 2.
    let z0 = dist.sample(64, &mut rng);
    let e1 = roundtrip(&field, &z0, &TimeGrid::uniform(50).unwrap(), 1, 0.01, None).unwrap();
    let e2 = roundtrip(&field, &z0, &grid, 2, 0.01, None).unwrap();
    let mse = |r: &rfsolve::harness::RoundTrip| rfsolve::tensorio::mse(&z0, &r.reconstruction);
    assert!(mse(&e2) < mse(&e1));
}

#[test]
fn save_load_round_trip() {
    let field = MlpField::new(3, &[5, 4], 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    field.save(dir.path()).unwrap();
    let back = MlpField::load(dir.path()).unwrap();
    assert_eq!(back.params_flat(), field.params_flat());
    let z = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
    assert_eq!(
        back.evaluate(&z, 0.5, None).unwrap(),
        field.evaluate(&z, 0.5, None).unwrap()
    );
}

#[test]
fn distributions_sample_expected_shapes() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for d in [
        single_gaussian(),
        ToyDistribution::two_moons(0.1).unwrap(),
        ToyDistribution::checkerboard(4).unwrap(),
    ] {
        let s = d.sample(100, &mut rng);
        assert_eq!(s.shape(), &[100, 2]);
        assert!(s.is_finite());
    }
    let s = single_gaussian().sample(4000, &mut rng);
    let mean_x = s.data().chunks(2).map(|r| r[0]).sum::<f64>() / 4000.0;
    assert!((mean_x - 2.0).abs() < 0.05);
}

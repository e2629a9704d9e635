mod common;

use gaintune::preference_gp::{fit_with_prior, posterior_sample_with, NewtonOptions};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn derivatives_match_finite_differences() {
    common::laplace_derivatives(100, 1).unwrap();
}

#[test]
fn newton_mode_matches_brute_force() {
    common::laplace_dense_grid(10, 2).unwrap();
}

#[test]
fn likelihoods_are_normalized() {
    common::likelihood_normalization(2000, 3).unwrap();
}

#[test]
fn posterior_draws_match_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = common::Instance::random(4, 6, &mut rng);
    let model = fit_with_prior(&inst.ids(), inst.sigma.clone(), &inst.data, &inst.likelihood, NewtonOptions::default(), None)
        .unwrap();
    let n = 100_000;
    let draws: Vec<DVector<f64>> = (0..n).map(|_| posterior_sample_with(&model, &mut rng).unwrap()).collect();
    let mean = draws.iter().fold(DVector::zeros(4), |acc, d| acc + d) / n as f64;
    let cov = draws.iter().fold(DMatrix::zeros(4, 4), |acc, d| {
        let c = d - &mean;
        acc + &c * c.transpose()
    }) / (n - 1) as f64;
    for i in 0..4 {
        let se = (model.covariance[(i, i)] / n as f64).sqrt();
        assert!((mean[i] - model.mean[i]).abs() < 3.0 * se, "coordinate {i}");
    }
    assert!((&cov - &model.covariance).norm() / model.covariance.norm() < 0.05);
}

#[test]
fn warm_start_reaches_the_same_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = common::Instance::random(5, 8, &mut rng);
    let cold = fit_with_prior(&inst.ids(), inst.sigma.clone(), &inst.data, &inst.likelihood, NewtonOptions::default(), None)
        .unwrap();
    let start = inst.ids().into_iter().map(|id| (id, 3.0)).collect();
    let warm = fit_with_prior(
        &inst.ids(),
        inst.sigma.clone(),
        &inst.data,
        &inst.likelihood,
        NewtonOptions::default(),
        Some(&start),
    )
    .unwrap();
    assert!((cold.mean - warm.mean).amax() < 1e-6);
}

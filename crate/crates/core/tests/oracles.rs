mod common;

use proptest::prelude::*;
use rand::Rng;
use vstree::gradient::{objective_value, NoiseDraw, ObjectiveKind};
use vstree::soft_tree::{log_likelihood, predict_mean, routing_probs};
use vstree::{FlatParams, IsotropicPrior, LeafKind, LowRankGaussian, OutputMode, SoftTreeSpec};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn tree_case() -> impl Strategy<Value = (SoftTreeSpec, Vec<f64>, Vec<f64>, f64)> {
    (1usize..=4, 1usize..=3, any::<bool>(), 0.2f64..8.0, any::<u64>()).prop_map(|(depth, p, linear, beta, seed)| {
        let kind = if linear { LeafKind::Linear } else { LeafKind::Constant };
        let spec = SoftTreeSpec::new(depth, p, kind, beta, OutputMode::Density).unwrap();
        let mut rng = vstree::rng::seeded(seed);
        let theta = (0..spec.param_count()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        (spec, theta, x, rng.random_range(-2.0..2.0))
    })
}

fn posterior(p: usize, k: usize, seed: u64) -> LowRankGaussian {
    let mut rng = vstree::rng::seeded(seed);
    let mean = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let diag = (0..p).map(|_| rng.random_range(-2.5..1.0)).collect();
    let factor = (0..p * k).map(|_| rng.random_range(-0.7..0.7)).collect();
    LowRankGaussian::new(mean, diag, factor, k).unwrap()
}

proptest! {
    #[test]
    fn tree_matches_naive_recursion((spec, theta, x, y) in tree_case()) {
        let params = FlatParams(theta.clone());
        let probs = routing_probs(&spec, &params, &x).unwrap();
        for (a, b) in probs.iter().zip(common::leaf_probs(&spec, &theta, &x)) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
        let ll = log_likelihood(&spec, &params, &x, y).unwrap();
        prop_assert!(close(ll, common::tree_density(&spec, &theta, &x, y).ln(), 1e-10));
        let m = predict_mean(&spec, &params, &x).unwrap();
        prop_assert!((m - common::tree_mean(&spec, &theta, &x)).abs() < 1e-10);
    }

    #[test]
    fn kl_matches_dense((p, k, seed, gamma) in (1usize..12, 0usize..5, any::<u64>(), 0.1f64..4.0)) {
        let q = posterior(p, k.min(p), seed);
        let prior = IsotropicPrior::new(gamma).unwrap();
        let kl = q.kl_to_isotropic(&prior).unwrap();
        prop_assert!(close(kl, common::dense_kl(&q, gamma), 1e-9), "{} vs {}", kl, common::dense_kl(&q, gamma));
        let (kl2, _) = q.kl_with_gradient(&prior).unwrap();
        prop_assert!(close(kl, kl2, 1e-12));
    }

    #[test]
    fn covariance_matches_dense((p, k, seed) in (1usize..10, 0usize..4, any::<u64>())) {
        let q = posterior(p, k.min(p), seed);
        let dense = common::dense_covariance(&q);
        let cov = q.covariance();
        for i in 0..p {
            for j in 0..p {
                prop_assert!((cov[i * p + j] - dense[(i, j)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sample_covariance_converges() {
    let (p, k, draws) = (5, 2, 200_000);
    let q = posterior(p, k, 3);
    let dense = common::dense_covariance(&q);
    let mut rng = vstree::rng::seeded(8);
    let mut mean = vec![0.0; p];
    let mut second = vec![0.0; p * p];
    for _ in 0..draws {
        let e = NoiseDraw::standard(&mut rng, p, k);
        let s = q.sample(&e.diag, &e.lowrank).unwrap();
        for i in 0..p {
            mean[i] += s[i] / draws as f64;
            for j in 0..p {
                second[i * p + j] += s[i] * s[j] / draws as f64;
            }
        }
    }
    let scale = dense.diagonal().max();
    for i in 0..p {
        assert!((mean[i] - q.mean()[i]).abs() < 0.02 * scale.sqrt());
        for j in 0..p {
            let c = second[i * p + j] - mean[i] * mean[j];
            assert!((c - dense[(i, j)]).abs() < 0.02 * scale, "({i},{j}) {c} vs {}", dense[(i, j)]);
        }
    }
}

#[test]
fn objective_matches_reference() {
    for (depth, kind, rank, seed) in [(1, LeafKind::Constant, 0, 1), (2, LeafKind::Linear, 2, 2), (3, LeafKind::Constant, 1, 3)] {
        let spec = SoftTreeSpec::new(depth, 2, kind, 2.0, OutputMode::Density).unwrap();
        let q = posterior(spec.param_count(), rank, seed);
        let mut rng = vstree::rng::seeded(seed + 100);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: Vec<NoiseDraw> = (0..3).map(|_| NoiseDraw::standard(&mut rng, q.dim(), rank)).collect();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = noise.iter().map(|n| (n.diag.clone(), n.lowrank.clone())).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let prior = IsotropicPrior::new(0.7).unwrap();
        let cases = [
            (ObjectiveKind::Elbo, common::Likelihood::Mixture),
            (ObjectiveKind::BoostedResidual { noise_std: 0.4 }, common::Likelihood::MeanGaussian(0.4)),
        ];
        for (kind, lik) in cases {
            let (value, _, _) = objective_value(&q, &rows, &ys, &spec, &prior, &noise, kind, 0.25).unwrap();
            let reference = common::objective(&q, &spec, 0.7, &xs, &ys, &pairs, &lik, 0.25);
            assert!(close(value, reference, 1e-9), "{value} vs {reference}");
        }
    }
}

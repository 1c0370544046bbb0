//! Reference implementations used as test oracles. Everything here is
//! written independently of the library internals: plain probability-space
//! tree recursion and dense linear algebra.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use vstree::{LeafKind, LowRankGaussian, SoftTreeSpec};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normal_pdf(y: f64, m: f64, s: f64) -> f64 {
    let u = (y - m) / s;
    (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Leaf reach probabilities by explicit recursion from the root.
pub fn leaf_probs(spec: &SoftTreeSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    fn walk(spec: &SoftTreeSpec, theta: &[f64], x: &[f64], node: usize, prob: f64, out: &mut [f64]) {
        let p = spec.feature_dim;
        let internal = (1usize << spec.depth) - 1;
        if node >= internal {
            out[node - internal] = prob;
            return;
        }
        let o = node * (p + 1);
        let right = logistic(spec.beta * (dot(&theta[o..o + p], x) + theta[o + p]));
        walk(spec, theta, x, 2 * node + 1, prob * (1.0 - right), out);
        walk(spec, theta, x, 2 * node + 2, prob * right, out);
    }
    let mut out = vec![0.0; 1usize << spec.depth];
    walk(spec, theta, x, 0, 1.0, &mut out);
    out
}

/// Mean and std of every leaf at `x`.
pub fn leaf_moments(spec: &SoftTreeSpec, theta: &[f64], x: &[f64]) -> Vec<(f64, f64)> {
    let p = spec.feature_dim;
    let internal = (1usize << spec.depth) - 1;
    let start = internal * (p + 1);
    (0..=internal)
        .map(|l| match spec.leaf_kind {
            LeafKind::Constant => {
                let o = start + 2 * l;
                (theta[o], softplus(theta[o + 1]))
            }
            LeafKind::Linear => {
                let o = start + (2 * p + 2) * l;
                let m = dot(&theta[o..o + p], x) + theta[o + p];
                let s = dot(&theta[o + p + 1..o + 2 * p + 1], x) + theta[o + 2 * p + 1];
                (m, softplus(s))
            }
        })
        .collect()
}

pub fn tree_density(spec: &SoftTreeSpec, theta: &[f64], x: &[f64], y: f64) -> f64 {
    let probs = leaf_probs(spec, theta, x);
    leaf_moments(spec, theta, x).iter().zip(&probs).map(|(&(m, s), q)| q * normal_pdf(y, m, s)).sum()
}

pub fn tree_mean(spec: &SoftTreeSpec, theta: &[f64], x: &[f64]) -> f64 {
    let probs = leaf_probs(spec, theta, x);
    leaf_moments(spec, theta, x).iter().zip(&probs).map(|(&(m, _), q)| q * m).sum()
}

/// Dense `diag(softplus(diag_raw)²) + V Vᵀ`.
pub fn dense_covariance(q: &LowRankGaussian) -> DMatrix<f64> {
    let p = q.dim();
    let k = q.rank();
    let v = DMatrix::from_row_slice(p, k, q.factor());
    let d = DVector::from_iterator(p, q.diag_raw().iter().map(|&r| softplus(r).powi(2)));
    DMatrix::from_diagonal(&d) + &v * v.transpose()
}

/// KL(N(μ, Σ) ‖ N(0, γI)) from the dense covariance.
pub fn dense_kl(q: &LowRankGaussian, gamma: f64) -> f64 {
    let p = q.dim() as f64;
    let sigma = dense_covariance(q);
    let chol = sigma.clone().cholesky().expect("positive definite covariance");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mu2: f64 = q.mean().iter().map(|v| v * v).sum();
    0.5 * (sigma.trace() / gamma + mu2 / gamma - p + p * gamma.ln() - log_det)
}

pub enum Likelihood {
    Mixture,
    MeanGaussian(f64),
}

/// `(1/m) Σ_i Σ_batch log p(y | x, θ_i) - kl_scale · KL`, with
/// `θ_i = μ + softplus(ρ) ⊙ ε₁ᵢ + V ε₂ᵢ`.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    q: &LowRankGaussian,
    spec: &SoftTreeSpec,
    gamma: f64,
    xs: &[Vec<f64>],
    ys: &[f64],
    noise: &[(Vec<f64>, Vec<f64>)],
    lik: &Likelihood,
    kl_scale: f64,
) -> f64 {
    let p = q.dim();
    let k = q.rank();
    let mut fit = 0.0;
    for (e1, e2) in noise {
        let theta: Vec<f64> = (0..p)
            .map(|j| {
                let low: f64 = (0..k).map(|c| q.factor()[j * k + c] * e2[c]).sum();
                q.mean()[j] + softplus(q.diag_raw()[j]) * e1[j] + low
            })
            .collect();
        for (x, &y) in xs.iter().zip(ys) {
            fit += match lik {
                Likelihood::Mixture => tree_density(spec, &theta, x, y).ln(),
                Likelihood::MeanGaussian(s) => normal_pdf(y, tree_mean(spec, &theta, x), *s).ln(),
            };
        }
    }
    fit / noise.len() as f64 - kl_scale * dense_kl(q, gamma)
}

/// Composite Simpson rule on `[a, b]` with `intervals` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    assert!(intervals.is_multiple_of(2));
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

//! Exact gradients of the variational objective.
//!
//! The objective for one minibatch is
//!
//! ```text
//! (1/m) Σ_i Σ_batch log p(y | x, θ_i)  -  kl_scale · KL(q ‖ prior)
//! ```
//!
//! with `θ_i = mean + softplus(diag_raw) ⊙ ε₁ᵢ + V ε₂ᵢ` for caller-supplied
//! noise. The data term is differentiated by a hand-written reverse pass over
//! the tree ([`TreeTape`]); the pullback through the reparameterization is
//! `∂/∂mean = g`, `∂/∂diag_raw = g ⊙ ε₁ ⊙ sigmoid(diag_raw)`, `∂/∂V = g ε₂ᵀ`.

use crate::activation::{gaussian_log_density, log_softplus, log_sum_exp, sigmoid, softplus};
use crate::error::{Error, Result};
use crate::lowrank::{IsotropicPrior, LowRankGaussian, PosteriorGradient};
use crate::soft_tree::{gate_logit, leaf_raw, log_mass_into, LeafKind, SoftTreeSpec};

/// Per-example likelihood used by the data term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    /// Full soft-tree mixture density.
    Elbo,
    /// `N(y; predict_mean(x), noise_std²)`: the weak-learner objective for
    /// boosted ensembles. Leaf std parameters receive no gradient.
    BoostedResidual { noise_std: f64 },
}

/// Standard-normal draws for one Monte Carlo sample of the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub diag: Vec<f64>,
    pub lowrank: Vec<f64>,
}

impl NoiseDraw {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self { diag: vec![0.0; dim], lowrank: vec![0.0; rank] }
    }

    pub fn standard<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize, rank: usize) -> Self {
        let diag = crate::rng::normal_vec(rng, dim);
        let lowrank = crate::rng::normal_vec(rng, rank);
        Self { diag, lowrank }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    /// `data_fit - kl_scale * kl`.
    pub value: f64,
    /// Monte Carlo average of the summed batch log-likelihood.
    pub data_fit: f64,
    /// Unscaled KL divergence.
    pub kl: f64,
    pub gradient: PosteriorGradient,
}

/// Forward trace of one tree evaluation, reused across examples.
///
/// `backward` accumulates the derivative of the recorded per-example term
/// with respect to the flat tree parameters.
pub struct TreeTape {
    spec: SoftTreeSpec,
    /// Log mass per node (internal then leaves), later overwritten.
    log_mass: Vec<f64>,
    /// `sigmoid(beta * z_n)` for each internal node.
    gate: Vec<f64>,
    leaf_mean: Vec<f64>,
    leaf_raw: Vec<f64>,
    /// Per-node adjoint accumulator (subtree sums).
    acc: Vec<f64>,
    /// Per-leaf scratch (component log-densities).
    scratch: Vec<f64>,
}

impl TreeTape {
    pub fn new(spec: &SoftTreeSpec) -> Self {
        let nodes = spec.internal_count() + spec.leaf_count();
        Self {
            spec: *spec,
            log_mass: vec![0.0; nodes],
            gate: vec![0.0; spec.internal_count()],
            leaf_mean: vec![0.0; spec.leaf_count()],
            leaf_raw: vec![0.0; spec.leaf_count()],
            acc: vec![0.0; nodes],
            scratch: vec![0.0; spec.leaf_count()],
        }
    }

    fn forward_common(&mut self, theta: &[f64], x: &[f64]) {
        let spec = &self.spec;
        log_mass_into(spec, theta, x, &mut self.log_mass);
        for n in 0..spec.internal_count() {
            self.gate[n] = sigmoid(spec.beta * gate_logit(spec, theta, n, x));
        }
        for l in 0..spec.leaf_count() {
            let (m, r) = leaf_raw(spec, theta, l, x);
            self.leaf_mean[l] = m;
            self.leaf_raw[l] = r;
        }
    }

    /// Fill internal entries of `acc` with subtree sums of the leaf entries,
    /// then push `β (acc[right] - s_n acc[n])` into the gate gradients.
    fn backprop_gates(&mut self, x: &[f64], scale: f64, grad: &mut [f64]) {
        let spec = &self.spec;
        let internal = spec.internal_count();
        let p = spec.feature_dim;
        for n in (0..internal).rev() {
            self.acc[n] = self.acc[2 * n + 1] + self.acc[2 * n + 2];
        }
        for n in 0..internal {
            let dz = scale * spec.beta * (self.acc[2 * n + 2] - self.gate[n] * self.acc[n]);
            if dz == 0.0 {
                continue;
            }
            let o = spec.node_offset(n);
            for j in 0..p {
                grad[o + j] += dz * x[j];
            }
            grad[o + p] += dz;
        }
    }

    fn push_leaf(&self, leaf: usize, x: &[f64], d_mean: f64, d_raw: f64, grad: &mut [f64]) {
        let spec = &self.spec;
        let o = spec.leaf_offset(leaf);
        match spec.leaf_kind {
            LeafKind::Constant => {
                grad[o] += d_mean;
                grad[o + 1] += d_raw;
            }
            LeafKind::Linear => {
                let p = spec.feature_dim;
                for j in 0..p {
                    grad[o + j] += d_mean * x[j];
                    grad[o + p + 1 + j] += d_raw * x[j];
                }
                grad[o + p] += d_mean;
                grad[o + 2 * p + 1] += d_raw;
            }
        }
    }

    /// Mixture log-likelihood at `(x, y)`; adds `scale · ∂/∂θ` into `grad`.
    pub fn mixture_loglik(&mut self, theta: &[f64], x: &[f64], y: f64, scale: f64, grad: &mut [f64]) -> f64 {
        self.forward_common(theta, x);
        let internal = self.spec.internal_count();
        let leaves = self.spec.leaf_count();
        for l in 0..leaves {
            let raw = self.leaf_raw[l];
            self.scratch[l] = self.log_mass[internal + l]
                + gaussian_log_density(y, self.leaf_mean[l], softplus(raw), log_softplus(raw));
        }
        let ll = log_sum_exp(&self.scratch);
        for l in 0..leaves {
            let resp = (self.scratch[l] - ll).exp();
            self.acc[internal + l] = resp;
            let raw = self.leaf_raw[l];
            let s = softplus(raw);
            let diff = y - self.leaf_mean[l];
            let inv_var = 1.0 / (s * s);
            let d_mean = diff * inv_var;
            let d_std = -1.0 / s + diff * diff * inv_var / s;
            let w = scale * resp;
            self.push_leaf(l, x, w * d_mean, w * d_std * sigmoid(raw), grad);
        }
        self.backprop_gates(x, scale, grad);
        ll
    }

    /// `log N(y; predict_mean(x), noise_std²)`; adds `scale · ∂/∂θ` into `grad`.
    pub fn residual_loglik(
        &mut self,
        theta: &[f64],
        x: &[f64],
        y: f64,
        noise_std: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        self.forward_common(theta, x);
        let internal = self.spec.internal_count();
        let leaves = self.spec.leaf_count();
        let mut f = 0.0;
        for l in 0..leaves {
            let prob = self.log_mass[internal + l].exp();
            self.scratch[l] = prob;
            f += prob * self.leaf_mean[l];
        }
        let ll = gaussian_log_density(y, f, noise_std, noise_std.ln());
        let g = scale * (y - f) / (noise_std * noise_std);
        for l in 0..leaves {
            let prob = self.scratch[l];
            self.acc[internal + l] = prob * self.leaf_mean[l];
            self.push_leaf(l, x, g * prob, 0.0, grad);
        }
        self.backprop_gates(x, g, grad);
        ll
    }
}

/// Value and exact gradient of the Monte Carlo objective.
#[allow(clippy::too_many_arguments)]
pub fn objective_gradient(
    posterior: &LowRankGaussian,
    xs: &[&[f64]],
    ys: &[f64],
    spec: &SoftTreeSpec,
    prior: &IsotropicPrior,
    noise: &[NoiseDraw],
    kind: ObjectiveKind,
    kl_scale: f64,
) -> Result<ObjectiveValue> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "batch must be non-empty with matching sizes (x: {}, y: {})",
            xs.len(),
            ys.len()
        )));
    }
    if noise.is_empty() {
        return Err(Error::invalid("at least one Monte Carlo noise draw is required"));
    }
    let dim = spec.param_count();
    if posterior.dim() != dim {
        return Err(Error::invalid(format!(
            "posterior has dimension {}, tree needs {dim}",
            posterior.dim()
        )));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != spec.feature_dim) {
        return Err(Error::invalid(format!(
            "batch row has {} features, tree expects {}",
            x.len(),
            spec.feature_dim
        )));
    }
    if let ObjectiveKind::BoostedResidual { noise_std } = kind {
        if noise_std.is_nan() || noise_std <= 0.0 {
            return Err(Error::invalid("weak-learner noise std must be positive"));
        }
    }
    let rank = posterior.rank();
    let m = noise.len() as f64;
    let mut theta = vec![0.0; dim];
    let mut g_theta = vec![0.0; dim];
    let mut tape = TreeTape::new(spec);
    let mut grad = PosteriorGradient::zeros(dim, rank);
    let mut data_fit = 0.0;
    let diag_slope: Vec<f64> = posterior.diag_raw().iter().map(|&r| sigmoid(r)).collect();

    for draw in noise {
        posterior.sample_into(&draw.diag, &draw.lowrank, &mut theta)?;
        g_theta.iter_mut().for_each(|g| *g = 0.0);
        let mut sum = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            sum += match kind {
                ObjectiveKind::Elbo => tape.mixture_loglik(&theta, x, y, 1.0, &mut g_theta),
                ObjectiveKind::BoostedResidual { noise_std } => {
                    tape.residual_loglik(&theta, x, y, noise_std, 1.0, &mut g_theta)
                }
            };
        }
        data_fit += sum / m;
        for d in 0..dim {
            let g = g_theta[d] / m;
            grad.mean[d] += g;
            grad.diag_raw[d] += g * draw.diag[d] * diag_slope[d];
            let row = &mut grad.factor[d * rank..(d + 1) * rank];
            for (gv, e) in row.iter_mut().zip(&draw.lowrank) {
                *gv += g * e;
            }
        }
    }
    if !data_fit.is_finite() {
        return Err(Error::numeric("data-fit term is not finite"));
    }

    let (kl, kl_grad) = posterior.kl_with_gradient(prior)?;
    grad.add_scaled(&kl_grad, -kl_scale);
    check_gradient(&grad)?;
    Ok(ObjectiveValue { value: data_fit - kl_scale * kl, data_fit, kl, gradient: grad })
}

/// Objective value only, with no gradient bookkeeping.
#[allow(clippy::too_many_arguments)]
pub fn objective_value(
    posterior: &LowRankGaussian,
    xs: &[&[f64]],
    ys: &[f64],
    spec: &SoftTreeSpec,
    prior: &IsotropicPrior,
    noise: &[NoiseDraw],
    kind: ObjectiveKind,
    kl_scale: f64,
) -> Result<(f64, f64, f64)> {
    let dim = spec.param_count();
    let mut theta = vec![0.0; dim];
    let mut mass = vec![0.0; spec.internal_count() + spec.leaf_count()];
    let mut data_fit = 0.0;
    for draw in noise {
        posterior.sample_into(&draw.diag, &draw.lowrank, &mut theta)?;
        let mut sum = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            sum += match kind {
                ObjectiveKind::Elbo => crate::soft_tree::log_likelihood_unchecked(spec, &theta, x, y, &mut mass),
                ObjectiveKind::BoostedResidual { noise_std } => {
                    let f = crate::soft_tree::mean_unchecked(spec, &theta, x, &mut mass);
                    gaussian_log_density(y, f, noise_std, noise_std.ln())
                }
            };
        }
        data_fit += sum / noise.len() as f64;
    }
    let kl = posterior.kl_to_isotropic(prior)?;
    Ok((data_fit - kl_scale * kl, data_fit, kl))
}

fn check_gradient(grad: &PosteriorGradient) -> Result<()> {
    let blocks: [(&str, &[f64]); 3] = [
        ("mean", &grad.mean),
        ("diag_raw", &grad.diag_raw),
        ("factor", &grad.factor),
    ];
    for (name, block) in blocks {
        if let Some(i) = block.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in {name}[{i}]")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft_tree::OutputMode;
    use rand::Rng;

    fn setup(
        depth: usize,
        kind: LeafKind,
        rank: usize,
        seed: u64,
    ) -> (SoftTreeSpec, LowRankGaussian, Vec<Vec<f64>>, Vec<f64>, Vec<NoiseDraw>) {
        let p = 2;
        let spec = SoftTreeSpec::new(depth, p, kind, 1.3, OutputMode::Density).unwrap();
        let dim = spec.param_count();
        let mut rng = crate::rng::indexed_stream(seed, "grad-test", 0);
        let mean = (0..dim).map(|_| rng.random_range(-0.8..0.8)).collect();
        let diag = (0..dim).map(|_| rng.random_range(-3.0..-0.5)).collect();
        let factor = (0..dim * rank).map(|_| rng.random_range(-0.3..0.3)).collect();
        let q = LowRankGaussian::new(mean, diag, factor, rank).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..p).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let ys = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = (0..2).map(|_| NoiseDraw::standard(&mut rng, dim, rank)).collect();
        (spec, q, xs, ys, noise)
    }

    fn rows(xs: &[Vec<f64>]) -> Vec<&[f64]> {
        xs.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn unused_leaf_std_has_zero_gradient() {
        let (spec, q, xs, ys, noise) = setup(2, LeafKind::Constant, 1, 3);
        let prior = IsotropicPrior::new(1.0).unwrap();
        let out = objective_gradient(
            &q,
            &rows(&xs),
            &ys,
            &spec,
            &prior,
            &noise,
            ObjectiveKind::BoostedResidual { noise_std: 1.0 },
            0.0,
        )
        .unwrap();
        for l in 0..spec.leaf_count() {
            let o = spec.leaf_offset(l) + 1;
            assert_eq!(out.gradient.mean[o], 0.0);
            assert_eq!(out.gradient.diag_raw[o], 0.0);
        }
    }

    #[test]
    fn value_matches_value_only_path() {
        for kind in [ObjectiveKind::Elbo, ObjectiveKind::BoostedResidual { noise_std: 0.7 }] {
            let (spec, q, xs, ys, noise) = setup(3, LeafKind::Linear, 2, 9);
            let prior = IsotropicPrior::new(0.5).unwrap();
            let a = objective_gradient(&q, &rows(&xs), &ys, &spec, &prior, &noise, kind, 0.3).unwrap();
            let (v, d, k) = objective_value(&q, &rows(&xs), &ys, &spec, &prior, &noise, kind, 0.3).unwrap();
            assert!((a.value - v).abs() < 1e-10);
            assert!((a.data_fit - d).abs() < 1e-10);
            assert_eq!(a.kl, k);
        }
    }

    #[test]
    fn rejects_mismatched_batch() {
        let (spec, q, xs, _, noise) = setup(1, LeafKind::Constant, 0, 1);
        let prior = IsotropicPrior::new(1.0).unwrap();
        let r = objective_gradient(&q, &rows(&xs), &[0.0], &spec, &prior, &noise, ObjectiveKind::Elbo, 1.0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let r = objective_gradient(&q, &rows(&xs[..1]), &[0.0], &spec, &prior, &[], ObjectiveKind::Elbo, 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn residual_gradient_scales_with_residuals() {
        // Depth 1, zero gating weights: the mean is linear in the leaf means,
        // so the data-fit gradient on the leaf means is linear in y.
        let spec = SoftTreeSpec::new(1, 1, LeafKind::Constant, 1.0, OutputMode::MeanOnly).unwrap();
        let dim = spec.param_count();
        let q = LowRankGaussian::diagonal(vec![0.0; dim], vec![-30.0; dim]).unwrap();
        let prior = IsotropicPrior::new(1.0).unwrap();
        let xs = vec![vec![0.3], vec![-1.2], vec![0.8]];
        let ys = vec![0.5, -0.25, 1.5];
        let ys2: Vec<f64> = ys.iter().map(|y| 2.0 * y).collect();
        let noise = vec![NoiseDraw::zeros(dim, 0)];
        let kind = ObjectiveKind::BoostedResidual { noise_std: 1.0 };
        let a = objective_gradient(&q, &rows(&xs), &ys, &spec, &prior, &noise, kind, 0.0).unwrap();
        let b = objective_gradient(&q, &rows(&xs), &ys2, &spec, &prior, &noise, kind, 0.0).unwrap();
        for l in 0..2 {
            let o = spec.leaf_offset(l);
            assert!((b.gradient.mean[o] - 2.0 * a.gradient.mean[o]).abs() < 1e-8);
        }
    }

    #[test]
    fn central_differences_depth_two() {
        let prior = IsotropicPrior::new(0.8).unwrap();
        for (seed, kind, rank) in [(1, LeafKind::Constant, 0), (2, LeafKind::Linear, 1), (3, LeafKind::Linear, 3)] {
            let (spec, q, xs, ys, noise) = setup(2, kind, rank, seed);
            for objective in [ObjectiveKind::Elbo, ObjectiveKind::BoostedResidual { noise_std: 0.6 }] {
                let value = |flat: &[f64]| {
                    let mut q = q.clone();
                    q.set_flat(flat).unwrap();
                    objective_value(&q, &rows(&xs), &ys, &spec, &prior, &noise, objective, 0.5).unwrap().0
                };
                let analytic = objective_gradient(&q, &rows(&xs), &ys, &spec, &prior, &noise, objective, 0.5)
                    .unwrap()
                    .gradient
                    .to_flat();
                let flat = q.to_flat();
                for (i, g) in analytic.iter().enumerate() {
                    let h = 1e-4 * flat[i].abs().max(1.0);
                    let (mut up, mut down) = (flat.clone(), flat.clone());
                    up[i] += h;
                    down[i] -= h;
                    let fd = (value(&up) - value(&down)) / (2.0 * h);
                    assert!((fd - g).abs() <= 1e-5 * g.abs().max(1.0), "param {i}: fd {fd} vs {g}");
                }
            }
        }
    }
}

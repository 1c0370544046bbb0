//! Gaussian with diagonal-plus-low-rank covariance `diag[σ²] + V Vᵀ`.
//!
//! This is the variational family for all tree parameters. Standard
//! deviations are stored unconstrained and mapped through softplus.

use serde::{Deserialize, Serialize};

use crate::activation::{log_softplus, sigmoid, softplus};
use crate::error::{Error, Result};

/// Zero-mean isotropic Gaussian prior `N(0, variance · I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicPrior {
    pub variance: f64,
}

impl IsotropicPrior {
    pub fn new(variance: f64) -> Result<Self> {
        if !variance.is_finite() || variance <= 0.0 {
            return Err(Error::invalid(format!("prior variance must be positive, got {variance}")));
        }
        Ok(Self { variance })
    }

    /// Prior with standard deviation `scale`.
    pub fn from_scale(scale: f64) -> Result<Self> {
        Self::new(scale * scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGaussian {
    mean: Vec<f64>,
    diag_raw: Vec<f64>,
    /// Row-major `p × k`.
    factor: Vec<f64>,
    rank: usize,
}

/// Gradient of a scalar with respect to each parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGradient {
    pub mean: Vec<f64>,
    pub diag_raw: Vec<f64>,
    pub factor: Vec<f64>,
}

impl PosteriorGradient {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            diag_raw: vec![0.0; dim],
            factor: vec![0.0; dim * rank],
        }
    }

    /// Concatenation `[mean, diag_raw, factor]`, the same layout as
    /// [`LowRankGaussian::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mean.len() * 2 + self.factor.len());
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.diag_raw);
        out.extend_from_slice(&self.factor);
        out
    }

    pub fn add_scaled(&mut self, other: &PosteriorGradient, scale: f64) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += scale * b;
        }
        for (a, b) in self.diag_raw.iter_mut().zip(&other.diag_raw) {
            *a += scale * b;
        }
        for (a, b) in self.factor.iter_mut().zip(&other.factor) {
            *a += scale * b;
        }
    }
}

impl LowRankGaussian {
    pub fn new(mean: Vec<f64>, diag_raw: Vec<f64>, factor: Vec<f64>, rank: usize) -> Result<Self> {
        let p = mean.len();
        if diag_raw.len() != p {
            return Err(Error::invalid(format!(
                "diag_raw has length {}, expected {p}",
                diag_raw.len()
            )));
        }
        if factor.len() != p * rank {
            return Err(Error::invalid(format!(
                "factor has {} entries, expected {p}x{rank}",
                factor.len()
            )));
        }
        if rank > p {
            return Err(Error::invalid(format!("rank {rank} exceeds dimension {p}")));
        }
        Ok(Self { mean, diag_raw, factor, rank })
    }

    /// Mean-field Gaussian with a common standard deviation.
    pub fn diagonal(mean: Vec<f64>, diag_raw: Vec<f64>) -> Result<Self> {
        Self::new(mean, diag_raw, Vec::new(), 0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn diag_raw(&self) -> &[f64] {
        &self.diag_raw
    }

    /// Row-major `p × k` factor.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn mean_mut(&mut self) -> &mut [f64] {
        &mut self.mean
    }

    pub fn diag_raw_mut(&mut self) -> &mut [f64] {
        &mut self.diag_raw
    }

    pub fn factor_mut(&mut self) -> &mut [f64] {
        &mut self.factor
    }

    /// Effective per-coordinate standard deviation `softplus(diag_raw)`.
    pub fn diag_std(&self) -> Vec<f64> {
        self.diag_raw.iter().map(|&r| softplus(r)).collect()
    }

    /// Total number of free parameters: `2p + pk`.
    pub fn param_len(&self) -> usize {
        2 * self.dim() + self.factor.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.diag_raw);
        out.extend_from_slice(&self.factor);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::invalid(format!(
                "flat vector has length {}, expected {}",
                flat.len(),
                self.param_len()
            )));
        }
        let p = self.dim();
        self.mean.copy_from_slice(&flat[..p]);
        self.diag_raw.copy_from_slice(&flat[p..2 * p]);
        self.factor.copy_from_slice(&flat[2 * p..]);
        Ok(())
    }

    /// Reparameterized draw `mean + softplus(diag_raw) ⊙ ε₁ + V ε₂`.
    pub fn sample(&self, noise_std: &[f64], noise_lowrank: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(noise_std, noise_lowrank, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&self, noise_std: &[f64], noise_lowrank: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.dim();
        let k = self.rank;
        if noise_std.len() != p || noise_lowrank.len() != k || out.len() != p {
            return Err(Error::invalid(format!(
                "noise lengths ({}, {}) do not match (p={p}, k={k})",
                noise_std.len(),
                noise_lowrank.len()
            )));
        }
        for d in 0..p {
            let row = &self.factor[d * k..(d + 1) * k];
            let low: f64 = row.iter().zip(noise_lowrank).map(|(v, e)| v * e).sum();
            out[d] = self.mean[d] + softplus(self.diag_raw[d]) * noise_std[d] + low;
        }
        Ok(())
    }

    /// Dense covariance, row-major `p × p`. For tests and diagnostics.
    pub fn covariance(&self) -> Vec<f64> {
        let p = self.dim();
        let k = self.rank;
        let mut cov = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                let vi = &self.factor[i * k..(i + 1) * k];
                let vj = &self.factor[j * k..(j + 1) * k];
                cov[i * p + j] = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
            }
            let s = softplus(self.diag_raw[i]);
            cov[i * p + i] += s * s;
        }
        cov
    }

    fn check_finite(&self) -> Result<()> {
        let blocks: [(&str, &[f64]); 3] = [
            ("mean", &self.mean),
            ("diag_raw", &self.diag_raw),
            ("factor", &self.factor),
        ];
        for (name, block) in blocks {
            if let Some(i) = block.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite {name}[{i}] = {}", block[i])));
            }
        }
        Ok(())
    }

    /// `V' = diag[σ²]⁻¹ V` (row-major `p × k`).
    fn scaled_factor(&self) -> Vec<f64> {
        let k = self.rank;
        let mut out = self.factor.clone();
        for (d, &r) in self.diag_raw.iter().enumerate() {
            let inv_var = (-2.0 * log_softplus(r)).exp();
            for v in &mut out[d * k..(d + 1) * k] {
                *v *= inv_var;
            }
        }
        out
    }

    /// Capacitance matrix `I_k + Vᵀ diag[σ²]⁻¹ V`, row-major.
    fn capacitance(&self) -> Vec<f64> {
        let k = self.rank;
        let scaled = self.scaled_factor();
        let mut c = vec![0.0; k * k];
        for d in 0..self.dim() {
            let v = &self.factor[d * k..(d + 1) * k];
            let s = &scaled[d * k..(d + 1) * k];
            for i in 0..k {
                for j in 0..k {
                    c[i * k + j] += v[i] * s[j];
                }
            }
        }
        for i in 0..k {
            c[i * k + i] += 1.0;
        }
        c
    }

    /// `log det(I_k + Vᵀ diag[σ²]⁻¹ V)` via Cholesky of the `k × k` capacitance.
    pub fn log_det_capacitance(&self) -> Result<f64> {
        self.check_finite()?;
        if self.rank == 0 {
            return Ok(0.0);
        }
        let chol = cholesky(&self.capacitance(), self.rank)?;
        Ok(chol_log_det(&chol, self.rank))
    }

    /// Closed-form `KL(q ‖ N(0, γ I))`.
    pub fn kl_to_isotropic(&self, prior: &IsotropicPrior) -> Result<f64> {
        self.check_finite()?;
        let gamma = prior.variance;
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::invalid("prior variance must be positive"));
        }
        let p = self.dim() as f64;
        let mut acc = 0.0;
        for &r in &self.diag_raw {
            let log_var = 2.0 * log_softplus(r);
            acc += log_var.exp() / gamma - log_var;
        }
        let v_sq: f64 = self.factor.iter().map(|v| v * v).sum();
        let mu_sq: f64 = self.mean.iter().map(|v| v * v).sum();
        let delta = self.log_det_capacitance()?;
        acc += v_sq / gamma - delta + mu_sq / gamma + p * (gamma.ln() - 1.0);
        let kl = 0.5 * acc;
        if !kl.is_finite() {
            return Err(Error::numeric("KL divergence is not finite"));
        }
        // Rounding can leave a tiny negative value when q is the prior.
        Ok(kl.max(0.0))
    }

    /// KL value and its gradient with respect to `(mean, diag_raw, factor)`.
    pub fn kl_with_gradient(&self, prior: &IsotropicPrior) -> Result<(f64, PosteriorGradient)> {
        let kl = self.kl_to_isotropic(prior)?;
        let gamma = prior.variance;
        let p = self.dim();
        let k = self.rank;
        let mut grad = PosteriorGradient::zeros(p, k);
        for (g, m) in grad.mean.iter_mut().zip(&self.mean) {
            *g = m / gamma;
        }
        // W = D⁻¹ V C⁻¹ ; dΔ/dV = 2W ; dΔ/dσ²_d = -(W Vᵀ D⁻¹)_dd
        let mut w = vec![0.0; p * k];
        if k > 0 {
            let chol = cholesky(&self.capacitance(), k)?;
            let scaled = self.scaled_factor();
            for d in 0..p {
                let row = chol_solve(&chol, k, &scaled[d * k..(d + 1) * k]);
                w[d * k..(d + 1) * k].copy_from_slice(&row);
            }
        }
        for d in 0..p {
            let r = self.diag_raw[d];
            let sigma = softplus(r);
            let inv_var = (-2.0 * log_softplus(r)).exp();
            let v = &self.factor[d * k..(d + 1) * k];
            let wd = &w[d * k..(d + 1) * k];
            let quad: f64 = wd.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() * inv_var;
            let d_var = 0.5 * (1.0 / gamma - inv_var + quad);
            grad.diag_raw[d] = d_var * 2.0 * sigma * sigmoid(r);
            for j in 0..k {
                grad.factor[d * k + j] = v[j] / gamma - wd[j];
            }
        }
        Ok((kl, grad))
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// row-major `n × n` matrix.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for t in 0..j {
                s -= l[i * n + t] * l[j * n + t];
            }
            if i == j {
                if !s.is_finite() || s <= 0.0 {
                    return Err(Error::numeric(format!(
                        "matrix is not positive definite (pivot {i} = {s})"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

pub(crate) fn chol_log_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Solve `L Lᵀ x = b`.
pub(crate) fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for t in 0..i {
            s -= l[i * n + t] * y[t];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for t in i + 1..n {
            s -= l[t * n + i] * y[t];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

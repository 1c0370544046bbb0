//! Fixed-depth soft decision trees.
//!
//! A tree of depth `D` has `2^D - 1` internal nodes in breadth-first order
//! (children of node `n` are `2n + 1` on the left and `2n + 2` on the right)
//! and `2^D` leaves ordered left to right. Node `n` routes right with
//! probability `sigmoid(beta * (w_n · x + b_n))`.
//!
//! All parameters live in one flat vector:
//!
//! ```text
//! [ (w_0, b_0), ..., (w_{N-1}, b_{N-1}),  leaf_0, ..., leaf_{L-1} ]
//! ```
//!
//! where a constant leaf is `(mu, alpha)` with std `softplus(alpha)` and a
//! linear leaf is `(w, b, w_hat, b_hat)` with mean `w · x + b` and std
//! `softplus(w_hat · x + b_hat)`.

use serde::{Deserialize, Serialize};

use crate::activation::{gaussian_log_density, log_sigmoid, log_softplus, log_sum_exp, softplus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Constant,
    Linear,
}

/// Whether the tree is a full predictive density or a mean regressor
/// (the weak-learner form used inside boosted ensembles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Density,
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftTreeSpec {
    pub depth: usize,
    pub feature_dim: usize,
    pub leaf_kind: LeafKind,
    /// Inverse temperature applied to every gating logit.
    pub beta: f64,
    pub output_mode: OutputMode,
}

impl SoftTreeSpec {
    pub fn new(
        depth: usize,
        feature_dim: usize,
        leaf_kind: LeafKind,
        beta: f64,
        output_mode: OutputMode,
    ) -> Result<Self> {
        let spec = Self { depth, feature_dim, leaf_kind, beta, output_mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 20 {
            return Err(Error::invalid(format!("depth must be in 1..=20, got {}", self.depth)));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be at least 1"));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn internal_count(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Parameters per leaf: 2 for constant leaves, `2p + 2` for linear ones.
    pub fn leaf_param_len(&self) -> usize {
        match self.leaf_kind {
            LeafKind::Constant => 2,
            LeafKind::Linear => 2 * self.feature_dim + 2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.internal_count() * (self.feature_dim + 1) + self.leaf_count() * self.leaf_param_len()
    }

    /// Offset of `(w_n, b_n)` in the flat vector.
    pub fn node_offset(&self, node: usize) -> usize {
        node * (self.feature_dim + 1)
    }

    pub fn leaf_offset(&self, leaf: usize) -> usize {
        self.internal_count() * (self.feature_dim + 1) + leaf * self.leaf_param_len()
    }

    pub(crate) fn check_params(&self, params: &FlatParams) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, tree needs {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::invalid(format!(
                "input has {} features, tree expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("input feature {j} is not finite")));
        }
        Ok(())
    }
}

/// Flat parameter vector of one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(spec: &SoftTreeSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LeafParams {
    Constant { mean: f64, alpha: f64 },
    Linear { weights: Vec<f64>, bias: f64, std_weights: Vec<f64>, std_bias: f64 },
}

/// Structured view of a [`FlatParams`] vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub gates: Vec<GateParams>,
    pub leaves: Vec<LeafParams>,
}

impl TreeParams {
    pub fn unpack(spec: &SoftTreeSpec, params: &FlatParams) -> Result<Self> {
        spec.check_params(params)?;
        let p = spec.feature_dim;
        let v = params.as_slice();
        let gates = (0..spec.internal_count())
            .map(|n| {
                let o = spec.node_offset(n);
                GateParams { weights: v[o..o + p].to_vec(), bias: v[o + p] }
            })
            .collect();
        let leaves = (0..spec.leaf_count())
            .map(|l| {
                let o = spec.leaf_offset(l);
                match spec.leaf_kind {
                    LeafKind::Constant => LeafParams::Constant { mean: v[o], alpha: v[o + 1] },
                    LeafKind::Linear => LeafParams::Linear {
                        weights: v[o..o + p].to_vec(),
                        bias: v[o + p],
                        std_weights: v[o + p + 1..o + 2 * p + 1].to_vec(),
                        std_bias: v[o + 2 * p + 1],
                    },
                }
            })
            .collect();
        Ok(Self { gates, leaves })
    }

    pub fn pack(&self, spec: &SoftTreeSpec) -> Result<FlatParams> {
        let p = spec.feature_dim;
        if self.gates.len() != spec.internal_count() || self.leaves.len() != spec.leaf_count() {
            return Err(Error::invalid("structured parameters do not match tree shape"));
        }
        let mut out = Vec::with_capacity(spec.param_count());
        for g in &self.gates {
            if g.weights.len() != p {
                return Err(Error::invalid("gate weight length mismatch"));
            }
            out.extend_from_slice(&g.weights);
            out.push(g.bias);
        }
        for leaf in &self.leaves {
            match (leaf, spec.leaf_kind) {
                (LeafParams::Constant { mean, alpha }, LeafKind::Constant) => {
                    out.push(*mean);
                    out.push(*alpha);
                }
                (LeafParams::Linear { weights, bias, std_weights, std_bias }, LeafKind::Linear) => {
                    if weights.len() != p || std_weights.len() != p {
                        return Err(Error::invalid("leaf weight length mismatch"));
                    }
                    out.extend_from_slice(weights);
                    out.push(*bias);
                    out.extend_from_slice(std_weights);
                    out.push(*std_bias);
                }
                _ => return Err(Error::invalid("leaf kind does not match spec")),
            }
        }
        Ok(FlatParams(out))
    }
}

/// Gaussian predictive density at one leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafDensity {
    pub mean: f64,
    pub std: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gate logit `w_n · x + b_n` (before the inverse temperature).
#[inline]
pub(crate) fn gate_logit(spec: &SoftTreeSpec, v: &[f64], node: usize, x: &[f64]) -> f64 {
    let o = spec.node_offset(node);
    let p = spec.feature_dim;
    dot(&v[o..o + p], x) + v[o + p]
}

/// Leaf mean and the pre-softplus std argument.
#[inline]
pub(crate) fn leaf_raw(spec: &SoftTreeSpec, v: &[f64], leaf: usize, x: &[f64]) -> (f64, f64) {
    let o = spec.leaf_offset(leaf);
    match spec.leaf_kind {
        LeafKind::Constant => (v[o], v[o + 1]),
        LeafKind::Linear => {
            let p = spec.feature_dim;
            (
                dot(&v[o..o + p], x) + v[o + p],
                dot(&v[o + p + 1..o + 2 * p + 1], x) + v[o + 2 * p + 1],
            )
        }
    }
}

/// Log routing probability of every node (internal nodes followed by leaves,
/// breadth-first). Leaf `l` sits at index `internal_count + l`.
pub(crate) fn log_mass_into(spec: &SoftTreeSpec, v: &[f64], x: &[f64], out: &mut [f64]) {
    let internal = spec.internal_count();
    out[0] = 0.0;
    for n in 0..internal {
        let z = spec.beta * gate_logit(spec, v, n, x);
        let base = out[n];
        out[2 * n + 1] = base + log_sigmoid(-z);
        out[2 * n + 2] = base + log_sigmoid(z);
    }
}

fn node_buffer(spec: &SoftTreeSpec) -> Vec<f64> {
    vec![0.0; spec.internal_count() + spec.leaf_count()]
}

/// Probability of reaching each leaf, computed in log space.
pub fn routing_probs(spec: &SoftTreeSpec, params: &FlatParams, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let mut mass = node_buffer(spec);
    log_mass_into(spec, params.as_slice(), x, &mut mass);
    Ok(mass[spec.internal_count()..].iter().map(|m| m.exp()).collect())
}

pub fn leaf_density(spec: &SoftTreeSpec, params: &FlatParams, leaf_index: usize, x: &[f64]) -> Result<LeafDensity> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    if leaf_index >= spec.leaf_count() {
        return Err(Error::invalid(format!(
            "leaf index {leaf_index} out of range for {} leaves",
            spec.leaf_count()
        )));
    }
    let (mean, raw) = leaf_raw(spec, params.as_slice(), leaf_index, x);
    Ok(LeafDensity { mean, std: softplus(raw) })
}

/// `log Σ_l Pr(l | x) N(y; mean_l(x), std_l(x)²)`.
pub fn log_likelihood(spec: &SoftTreeSpec, params: &FlatParams, x: &[f64], y: f64) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    if !y.is_finite() {
        return Err(Error::numeric("target is not finite"));
    }
    let mut mass = node_buffer(spec);
    Ok(log_likelihood_unchecked(spec, params.as_slice(), x, y, &mut mass))
}

pub(crate) fn log_likelihood_unchecked(spec: &SoftTreeSpec, v: &[f64], x: &[f64], y: f64, mass: &mut [f64]) -> f64 {
    log_mass_into(spec, v, x, mass);
    let internal = spec.internal_count();
    for l in 0..spec.leaf_count() {
        let (mean, raw) = leaf_raw(spec, v, l, x);
        mass[internal + l] += gaussian_log_density(y, mean, softplus(raw), log_softplus(raw));
    }
    log_sum_exp(&mass[internal..])
}

/// Routing-weighted mean of the leaf means.
pub fn predict_mean(spec: &SoftTreeSpec, params: &FlatParams, x: &[f64]) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let mut mass = node_buffer(spec);
    Ok(moments_unchecked(spec, params.as_slice(), x, &mut mass).0)
}

/// Mean and variance of the leaf mixture at `x`.
pub fn predict_moments(spec: &SoftTreeSpec, params: &FlatParams, x: &[f64]) -> Result<(f64, f64)> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let mut mass = node_buffer(spec);
    Ok(moments_unchecked(spec, params.as_slice(), x, &mut mass))
}

pub(crate) fn moments_unchecked(spec: &SoftTreeSpec, v: &[f64], x: &[f64], mass: &mut [f64]) -> (f64, f64) {
    log_mass_into(spec, v, x, mass);
    let internal = spec.internal_count();
    let mut first = 0.0;
    let mut second = 0.0;
    for l in 0..spec.leaf_count() {
        let prob = mass[internal + l].exp();
        let (mean, raw) = leaf_raw(spec, v, l, x);
        let s = softplus(raw);
        first += prob * mean;
        second += prob * (s * s + mean * mean);
    }
    (first, (second - first * first).max(0.0))
}

pub(crate) fn mean_unchecked(spec: &SoftTreeSpec, v: &[f64], x: &[f64], mass: &mut [f64]) -> f64 {
    log_mass_into(spec, v, x, mass);
    let internal = spec.internal_count();
    (0..spec.leaf_count())
        .map(|l| mass[internal + l].exp() * leaf_raw(spec, v, l, x).0)
        .sum()
}

//! Fitting a single variational soft tree by maximising the ELBO.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::inverse_softplus;
use crate::adam::AdamState;
use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::gradient::{objective_gradient, objective_value, NoiseDraw, ObjectiveKind};
use crate::lowrank::{IsotropicPrior, LowRankGaussian};
use crate::rng;
use crate::soft_tree::{LeafKind, OutputMode, SoftTreeSpec};

/// Initial per-coordinate posterior standard deviation.
pub const INITIAL_STD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub depth: usize,
    pub leaf_kind: LeafKind,
    pub beta: f64,
    pub rank: usize,
    /// Prior standard deviation; the prior variance is its square.
    pub prior_scale: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub output_mode: OutputMode,
    /// Likelihood std of the mean-only objective, in standardized target units.
    pub mean_only_noise_std: f64,
    /// Accept a zero-variance target (its std is then forced to 1).
    pub allow_constant_target: bool,
    /// Minibatch objective is recorded every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            leaf_kind: LeafKind::Linear,
            beta: 10.0,
            rank: 5,
            prior_scale: 1.0,
            learning_rate: 1e-3,
            steps: 5000,
            batch_size: 256,
            mc_samples: 2,
            seed: 0,
            output_mode: OutputMode::Density,
            mean_only_noise_std: 1.0,
            allow_constant_target: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("prior_scale", self.prior_scale),
            ("learning_rate", self.learning_rate),
            ("mean_only_noise_std", self.mean_only_noise_std),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::invalid("batch_size and mc_samples must be at least 1"));
        }
        Ok(())
    }

    pub fn spec(&self, feature_dim: usize) -> Result<SoftTreeSpec> {
        let spec = SoftTreeSpec::new(self.depth, feature_dim, self.leaf_kind, self.beta, self.output_mode)?;
        if self.rank > spec.param_count() {
            return Err(Error::invalid(format!(
                "rank {} exceeds the {} tree parameters",
                self.rank,
                spec.param_count()
            )));
        }
        Ok(spec)
    }

    pub fn prior(&self) -> Result<IsotropicPrior> {
        IsotropicPrior::from_scale(self.prior_scale)
    }

    pub(crate) fn objective(&self) -> ObjectiveKind {
        match self.output_mode {
            OutputMode::Density => ObjectiveKind::Elbo,
            OutputMode::MeanOnly => ObjectiveKind::BoostedResidual { noise_std: self.mean_only_noise_std },
        }
    }
}

/// A fitted variational soft tree. The tree operates on standardized
/// inputs and targets; `standardization` maps to and from original units.
#[derive(Debug, Clone, PartialEq)]
pub struct VstModel {
    pub spec: SoftTreeSpec,
    pub posterior: LowRankGaussian,
    pub prior: IsotropicPrior,
    pub standardization: Standardization,
    /// Predictive std of a mean-only tree (standardized units).
    pub mean_only_noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Full-data ELBO estimate from the current minibatch.
    pub elbo: f64,
    pub data_fit: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Full-data ELBO before and after training under the same evaluation noise.
    pub initial_elbo: f64,
    pub final_elbo: f64,
}

#[derive(Debug, Clone)]
pub struct VstFit {
    pub model: VstModel,
    pub trace: TrainTrace,
}

/// Starting posterior: means `N(0, 0.1²)` (gating weights further scaled by
/// `1/sqrt(p)`), std [`INITIAL_STD`] everywhere, zero low-rank factor.
pub fn init_posterior(spec: &SoftTreeSpec, config: &TrainConfig, seed: u64) -> Result<LowRankGaussian> {
    let dim = spec.param_count();
    let mut rng = rng::stream(seed, "init");
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut mean: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let p = spec.feature_dim;
    let gate_scale = 1.0 / (p as f64).sqrt();
    for n in 0..spec.internal_count() {
        let o = spec.node_offset(n);
        mean[o..o + p].iter_mut().for_each(|w| *w *= gate_scale);
    }
    let raw = inverse_softplus(INITIAL_STD)?;
    LowRankGaussian::new(mean, vec![raw; dim], vec![0.0; dim * config.rank], config.rank)
}

fn check_training_data(data: &Dataset) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::invalid(format!("training needs at least 2 rows, got {}", data.len())));
    }
    if data.features().iter().chain(&data.target).any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data contains non-finite values"));
    }
    Ok(())
}

/// Fit a tree on `data` in original units.
pub fn fit_vst(data: &Dataset, config: &TrainConfig) -> Result<VstFit> {
    check_training_data(data)?;
    let stats = Standardization::fit(data)?;
    if stats.constant_target && !config.allow_constant_target {
        return Err(Error::invalid("target column has zero variance"));
    }
    fit_vst_with(data, config, stats, None)
}

/// Fit with fixed standardization and an optional warm-start posterior.
pub fn fit_vst_with(
    data: &Dataset,
    config: &TrainConfig,
    standardization: Standardization,
    warm_start: Option<&LowRankGaussian>,
) -> Result<VstFit> {
    check_training_data(data)?;
    let standardized = standardization.transform(data)?;
    let (model, trace) = fit_standardized(&standardized, config, standardization, warm_start, config.seed)?;
    Ok(VstFit { model, trace })
}

/// Training loop on data that is already in the model's standardized units.
pub(crate) fn fit_standardized(
    data: &Dataset,
    config: &TrainConfig,
    standardization: Standardization,
    warm_start: Option<&LowRankGaussian>,
    seed: u64,
) -> Result<(VstModel, TrainTrace)> {
    config.validate()?;
    let spec = config.spec(data.n_features())?;
    let prior = config.prior()?;
    let kind = config.objective();
    let mut posterior = match warm_start {
        Some(q) if q.dim() == spec.param_count() && q.rank() == config.rank => q.clone(),
        Some(_) => return Err(Error::invalid("warm-start posterior does not match the tree shape")),
        None => init_posterior(&spec, config, seed)?,
    };
    let dim = spec.param_count();
    let n = data.len();
    let rows = data.rows();
    let batch_size = config.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);
    let kl_scale = 1.0 / batches_per_epoch as f64;

    let mut eval_rng = rng::stream(seed, "elbo-eval");
    let eval_noise: Vec<NoiseDraw> =
        (0..8).map(|_| NoiseDraw::standard(&mut eval_rng, dim, config.rank)).collect();
    let full_elbo = |q: &LowRankGaussian| -> Result<f64> {
        Ok(objective_value(q, &rows, &data.target, &spec, &prior, &eval_noise, kind, 1.0)?.0)
    };
    let initial_elbo = full_elbo(&posterior)?;

    let mut batch_rng = rng::stream(seed, "batches");
    let mut noise_rng = rng::stream(seed, "mc-noise");
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut adam = AdamState::new(posterior.param_len(), config.learning_rate);
    let mut flat = posterior.to_flat();
    let mut trace = TrainTrace::default();
    let mut bx: Vec<&[f64]> = Vec::with_capacity(batch_size);
    let mut by: Vec<f64> = Vec::with_capacity(batch_size);

    for step in 0..config.steps {
        if cursor >= n {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(n);
        bx.clear();
        by.clear();
        for &i in &order[cursor..end] {
            bx.push(rows[i]);
            by.push(data.target[i]);
        }
        cursor = end;
        let noise: Vec<NoiseDraw> = (0..config.mc_samples)
            .map(|_| NoiseDraw::standard(&mut noise_rng, dim, config.rank))
            .collect();
        let obj = objective_gradient(&posterior, &bx, &by, &spec, &prior, &noise, kind, kl_scale)
            .map_err(|e| divergence(e, step))?;
        if !obj.value.is_finite() {
            return Err(Error::numeric(format!("objective diverged at step {step}")));
        }
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            let data_fit = obj.data_fit * n as f64 / bx.len() as f64;
            trace.rows.push(TraceRow { step, elbo: data_fit - obj.kl, data_fit, kl: obj.kl });
        }
        let descent: Vec<f64> = obj.gradient.to_flat().into_iter().map(|g| -g).collect();
        adam.step(&mut flat, &descent)?;
        posterior.set_flat(&flat)?;
    }

    trace.initial_elbo = initial_elbo;
    trace.final_elbo = full_elbo(&posterior).map_err(|e| divergence(e, config.steps))?;
    let model = VstModel {
        spec,
        posterior,
        prior,
        standardization,
        mean_only_noise_std: config.mean_only_noise_std,
    };
    Ok((model, trace))
}

fn divergence(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("training diverged at step {step}: {m}")),
        other => other,
    }
}

//! Monte Carlo predictive distributions, regression metrics and epistemic
//! uncertainty for fitted trees and ensembles.
//!
//! Draw `s` of a model under `seed` is a pure function of `(seed, s)`, so
//! every input in a batch sees the same posterior samples.

use crate::activation::{gaussian_log_density, log_sum_exp};
use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::rng;
use crate::soft_tree::{log_likelihood_unchecked, mean_unchecked, moments_unchecked, FlatParams, OutputMode, SoftTreeSpec};
use crate::vsgbm::{ensemble_means, joint_tree_params, sample_noise_variance, VsgbmModel};
use crate::vst::VstModel;

/// Default number of posterior draws for evaluation.
pub const DEFAULT_EVAL_SAMPLES: usize = 256;

/// One sampled predictive function, in standardized units.
pub trait FunctionDraw {
    fn mean(&mut self, x: &[f64]) -> f64;
    /// Aleatoric variance of this draw at `x`.
    fn variance(&mut self, x: &[f64]) -> f64;
    fn log_density(&mut self, x: &[f64], y: f64) -> f64;
}

/// A fitted model with a posterior over predictive functions.
pub trait PosteriorModel {
    type Draw: FunctionDraw;

    fn feature_dim(&self) -> usize;

    fn standardization(&self) -> &Standardization;

    /// Joint posterior draw number `index` under `seed`.
    fn draw(&self, seed: u64, index: u64) -> Result<Self::Draw>;
}

pub struct VstDraw {
    spec: SoftTreeSpec,
    params: FlatParams,
    noise_std: f64,
    mass: Vec<f64>,
}

impl VstDraw {
    pub fn new(model: &VstModel, params: FlatParams) -> Self {
        let spec = model.spec;
        Self {
            spec,
            params,
            noise_std: model.mean_only_noise_std,
            mass: vec![0.0; spec.internal_count() + spec.leaf_count()],
        }
    }
}

impl FunctionDraw for VstDraw {
    fn mean(&mut self, x: &[f64]) -> f64 {
        mean_unchecked(&self.spec, self.params.as_slice(), x, &mut self.mass)
    }

    fn variance(&mut self, x: &[f64]) -> f64 {
        match self.spec.output_mode {
            OutputMode::Density => moments_unchecked(&self.spec, self.params.as_slice(), x, &mut self.mass).1,
            OutputMode::MeanOnly => self.noise_std * self.noise_std,
        }
    }

    fn log_density(&mut self, x: &[f64], y: f64) -> f64 {
        match self.spec.output_mode {
            OutputMode::Density => log_likelihood_unchecked(&self.spec, self.params.as_slice(), x, y, &mut self.mass),
            OutputMode::MeanOnly => {
                let f = self.mean(x);
                gaussian_log_density(y, f, self.noise_std, self.noise_std.ln())
            }
        }
    }
}

impl PosteriorModel for VstModel {
    type Draw = VstDraw;

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    fn draw(&self, seed: u64, index: u64) -> Result<VstDraw> {
        let params = self.sample_params(&mut rng::indexed_stream(seed, "params", index))?;
        Ok(VstDraw::new(self, params))
    }
}

pub struct VsgbmDraw<'a> {
    model: &'a VsgbmModel,
    params: Vec<FlatParams>,
    noise_var: f64,
}

impl VsgbmDraw<'_> {
    pub fn noise_variance(&self) -> f64 {
        self.noise_var
    }
}

impl FunctionDraw for VsgbmDraw<'_> {
    fn mean(&mut self, x: &[f64]) -> f64 {
        ensemble_means(&self.model.trees, &self.params, &[x], self.model.shrinkage)[0]
    }

    fn variance(&mut self, _x: &[f64]) -> f64 {
        self.noise_var
    }

    fn log_density(&mut self, x: &[f64], y: f64) -> f64 {
        let f = self.mean(x);
        let s = self.noise_var.sqrt();
        gaussian_log_density(y, f, s, s.ln())
    }
}

impl VsgbmModel {
    /// Joint draw with tree parameters and observation noise taken from
    /// separate seeds.
    pub fn draw_with(&self, param_seed: u64, noise_seed: u64) -> Result<VsgbmDraw<'_>> {
        let params = joint_tree_params(&self.trees, param_seed)?;
        let noise_var = sample_noise_variance(&self.noise_posterior, &mut rng::seeded(noise_seed));
        Ok(VsgbmDraw { model: self, params, noise_var })
    }
}

impl<'a> PosteriorModel for &'a VsgbmModel {
    type Draw = VsgbmDraw<'a>;

    fn feature_dim(&self) -> usize {
        self.standardization.n_features()
    }

    fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    fn draw(&self, seed: u64, index: u64) -> Result<VsgbmDraw<'a>> {
        self.draw_with(rng::indexed_seed(seed, "params", index), rng::indexed_seed(seed, "noise", index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Units {
    #[default]
    Standardized,
    Original,
}

/// Monte Carlo predictive summary over a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub predictive_mean: Vec<f64>,
    pub predictive_std: Vec<f64>,
    /// Square root of the unbiased variance of the per-draw means.
    pub epistemic_std: Vec<f64>,
    /// Mean aleatoric variance over draws.
    pub aleatoric_var: Vec<f64>,
    /// Per-input means of each draw (`S` values per input).
    pub sample_means: Vec<Vec<f64>>,
    /// Present when targets were supplied.
    pub mean_loglik: Option<f64>,
    pub rmse: Option<f64>,
    pub units: Units,
}

fn check_rows<M: PosteriorModel>(model: &M, rows: &[&[f64]]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != model.feature_dim()) {
        return Err(Error::invalid(format!(
            "input has {} features, model expects {}",
            r.len(),
            model.feature_dim()
        )));
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric("input contains non-finite values"));
    }
    Ok(())
}

fn standardize_rows<M: PosteriorModel>(model: &M, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    check_rows(model, rows)?;
    Ok(rows.iter().map(|r| model.standardization().features(r)).collect())
}

fn draws<M: PosteriorModel>(model: &M, samples: usize, seed: u64) -> Result<Vec<M::Draw>> {
    if samples == 0 {
        return Err(Error::invalid("at least one posterior sample is required"));
    }
    (0..samples as u64).map(|s| model.draw(seed, s)).collect()
}

/// Per-input, per-draw means in standardized units (`rows × samples`).
pub fn sample_means<M: PosteriorModel>(model: &M, rows: &[&[f64]], samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let z = standardize_rows(model, rows)?;
    let mut ds = draws(model, samples, seed)?;
    Ok(z.iter().map(|x| ds.iter_mut().map(|d| d.mean(x)).collect()).collect())
}

/// Pointwise `log[(1/S) Σ_s p(y | x, θ_s)]` in standardized units.
pub fn pointwise_loglik_standardized<M: PosteriorModel>(
    model: &M,
    rows: &[&[f64]],
    targets: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if rows.len() != targets.len() {
        return Err(Error::invalid("row and target counts differ"));
    }
    let z = standardize_rows(model, rows)?;
    let mut ds = draws(model, samples, seed)?;
    let log_s = (samples as f64).ln();
    let mut comps = vec![0.0; samples];
    Ok(z.iter()
        .zip(targets)
        .map(|(x, &y)| {
            let ys = model.standardization().target(y);
            for (c, d) in comps.iter_mut().zip(ds.iter_mut()) {
                *c = d.log_density(x, ys);
            }
            log_sum_exp(&comps) - log_s
        })
        .collect())
}

/// Monte Carlo predictive log-density of `y` at `x`, both in original units.
pub fn predictive_loglik<M: PosteriorModel>(model: &M, x: &[f64], y: f64, samples: usize, seed: u64) -> Result<f64> {
    let ll = pointwise_loglik_standardized(model, &[x], &[y], samples, seed)?[0];
    Ok(ll - model.standardization().target_std.ln())
}

fn unbiased_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let shift = values[0];
    let m = values.iter().map(|v| v - shift).sum::<f64>() / n;
    values.iter().map(|v| (v - shift - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Unbiased variance of the per-draw predictive means at `x` (standardized units).
pub fn epistemic_uncertainty<M: PosteriorModel>(model: &M, x: &[f64], samples: usize, seed: u64) -> Result<f64> {
    Ok(epistemic_variances(model, &[x], samples, seed)?[0])
}

pub fn epistemic_variances<M: PosteriorModel>(model: &M, rows: &[&[f64]], samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::invalid("epistemic uncertainty needs at least 2 samples"));
    }
    Ok(sample_means(model, rows, samples, seed)?.iter().map(|m| unbiased_variance(m)).collect())
}

/// Full predictive summary of `data`; targets feed the likelihood and RMSE.
pub fn summarize<M: PosteriorModel>(model: &M, data: &Dataset, samples: usize, seed: u64, units: Units) -> Result<PredictiveSummary> {
    let rows = data.rows();
    let z = standardize_rows(model, &rows)?;
    let mut ds = draws(model, samples, seed)?;
    let stats = model.standardization();
    let scale = match units {
        Units::Standardized => 1.0,
        Units::Original => stats.target_std,
    };
    let shift = |m: f64| match units {
        Units::Standardized => m,
        Units::Original => stats.inverse_target(m),
    };
    let n = rows.len();
    let s = samples as f64;
    let mut summary = PredictiveSummary {
        predictive_mean: Vec::with_capacity(n),
        predictive_std: Vec::with_capacity(n),
        epistemic_std: Vec::with_capacity(n),
        aleatoric_var: Vec::with_capacity(n),
        sample_means: Vec::with_capacity(n),
        mean_loglik: None,
        rmse: None,
        units,
    };
    let mut lls = Vec::with_capacity(n);
    let mut sq = 0.0;
    let mut comps = vec![0.0; samples];
    for (i, x) in z.iter().enumerate() {
        let means: Vec<f64> = ds.iter_mut().map(|d| d.mean(x)).collect();
        let alea = ds.iter_mut().map(|d| d.variance(x)).sum::<f64>() / s;
        let mu = means.iter().sum::<f64>() / s;
        let pop_var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / s;
        let epi = if samples >= 2 { unbiased_variance(&means) } else { 0.0 };
        let y = stats.target(data.target[i]);
        for (c, d) in comps.iter_mut().zip(ds.iter_mut()) {
            *c = d.log_density(x, y);
        }
        lls.push(log_sum_exp(&comps) - s.ln());
        sq += (mu - y) * (mu - y);
        summary.predictive_mean.push(shift(mu));
        summary.predictive_std.push((pop_var + alea).sqrt() * scale);
        summary.epistemic_std.push(epi.sqrt() * scale);
        summary.aleatoric_var.push(alea * scale * scale);
        summary.sample_means.push(means.into_iter().map(shift).collect());
    }
    if n > 0 {
        let metrics = Metrics::from_standardized(&lls, (sq / n as f64).sqrt(), stats, units);
        summary.mean_loglik = Some(metrics.mean_loglik);
        summary.rmse = Some(metrics.rmse);
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mean_loglik: f64,
    pub rmse: f64,
}

impl Metrics {
    fn from_standardized(lls: &[f64], rmse: f64, stats: &Standardization, units: Units) -> Self {
        let mean_ll = lls.iter().sum::<f64>() / lls.len() as f64;
        match units {
            Units::Standardized => Self { mean_loglik: mean_ll, rmse },
            Units::Original => Self {
                mean_loglik: mean_ll - stats.target_std.ln(),
                rmse: rmse * stats.target_std,
            },
        }
    }
}

/// Mean test log-likelihood and RMSE of the Monte Carlo predictive mean.
pub fn regression_metrics<M: PosteriorModel>(model: &M, data: &Dataset, samples: usize, seed: u64, units: Units) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("metrics need a non-empty dataset"));
    }
    let rows = data.rows();
    let lls = pointwise_loglik_standardized(model, &rows, &data.target, samples, seed)?;
    let means = sample_means(model, &rows, samples, seed)?;
    let stats = model.standardization();
    let sq: f64 = means
        .iter()
        .zip(&data.target)
        .map(|(m, &y)| {
            let mu = m.iter().sum::<f64>() / samples as f64;
            let r = mu - stats.target(y);
            r * r
        })
        .sum();
    Ok(Metrics::from_standardized(&lls, (sq / data.len() as f64).sqrt(), stats, units))
}

/// Either kind of fitted model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vst(VstModel),
    Vsgbm(VsgbmModel),
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        match self {
            Model::Vst(m) => m.spec.feature_dim,
            Model::Vsgbm(m) => m.feature_dim(),
        }
    }

    pub fn standardization(&self) -> &Standardization {
        match self {
            Model::Vst(m) => &m.standardization,
            Model::Vsgbm(m) => &m.standardization,
        }
    }
}

/// Dispatch a generic predictive function over [`Model`].
#[macro_export]
macro_rules! with_model {
    ($model:expr, $m:ident => $body:expr) => {
        match $model {
            $crate::predictive::Model::Vst(inner) => {
                let $m = inner;
                $body
            }
            $crate::predictive::Model::Vsgbm(inner) => {
                let $m = &inner;
                $body
            }
        }
    };
}

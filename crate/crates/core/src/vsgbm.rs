//! Gradient-boosted ensembles of variational soft trees.
//!
//! Trees are fitted in sequence; tree `t` regresses the residual of one
//! fresh joint posterior draw of trees `0..t`. Observation noise is
//! homoskedastic with an inverse-Gamma posterior
//! `IG(a_sigma + n, b_sigma + rᵀr)` computed from a final joint draw.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::gradient::NoiseDraw;
use crate::rng;
use crate::soft_tree::{mean_unchecked, FlatParams, OutputMode};
use crate::vst::{fit_standardized, TrainConfig, TrainTrace, VstModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsgbmConfig {
    pub num_trees: usize,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Per-tree settings; the output mode is forced to mean-only and
    /// `mean_only_noise_std` is the weak-learner likelihood std.
    pub tree: TrainConfig,
    /// Multiplier on every tree's contribution. 1.0 is plain residual boosting.
    pub shrinkage: f64,
}

impl Default for VsgbmConfig {
    fn default() -> Self {
        Self { num_trees: 5, a_sigma: 3.0, b_sigma: 1.0, tree: TrainConfig::default(), shrinkage: 1.0 }
    }
}

impl VsgbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(Error::invalid("num_trees must be at least 1"));
        }
        if !self.a_sigma.is_finite() || self.a_sigma <= 1.0 {
            return Err(Error::invalid(format!("a_sigma must exceed 1, got {}", self.a_sigma)));
        }
        if !self.b_sigma.is_finite() || self.b_sigma <= 0.0 {
            return Err(Error::invalid(format!("b_sigma must be positive, got {}", self.b_sigma)));
        }
        if !self.shrinkage.is_finite() || self.shrinkage <= 0.0 {
            return Err(Error::invalid("shrinkage must be positive"));
        }
        self.tree.validate()
    }

    pub fn tree_config(&self) -> TrainConfig {
        TrainConfig { output_mode: OutputMode::MeanOnly, ..self.tree.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaPosterior {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGammaPosterior {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !shape.is_finite() || !scale.is_finite() || shape <= 0.0 || scale <= 0.0 {
            return Err(Error::invalid(format!("inverse-Gamma needs positive shape and scale ({shape}, {scale})")));
        }
        Ok(Self { shape, scale })
    }

    /// Conjugate update `(shape + n, scale + rᵀr)`.
    pub fn update(&self, residuals: &[f64]) -> Self {
        Self { shape: self.shape + residuals.len() as f64, scale: self.scale + sum_of_squares(residuals) }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }
}

pub(crate) fn sum_of_squares(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Draw `σ² = 1 / g` with `g ~ Gamma(shape, rate = scale)`.
pub fn sample_noise_variance<R: Rng + ?Sized>(post: &InverseGammaPosterior, rng: &mut R) -> f64 {
    let gamma = Gamma::new(post.shape, 1.0 / post.scale).expect("validated inverse-Gamma parameters");
    loop {
        let g: f64 = gamma.sample(rng);
        if g > 0.0 && g.is_finite() {
            return 1.0 / g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VsgbmModel {
    pub trees: Vec<VstModel>,
    pub noise_prior: InverseGammaPosterior,
    pub noise_posterior: InverseGammaPosterior,
    pub standardization: Standardization,
    pub shrinkage: f64,
    pub n_train: usize,
    /// Seed of the joint draw that produced the final residuals.
    pub final_draw_seed: u64,
}

#[derive(Debug, Clone)]
pub struct VsgbmFit {
    pub model: VsgbmModel,
    pub traces: Vec<TrainTrace>,
}

/// Per-tree parameter draws for one joint posterior sample.
pub fn joint_tree_params(trees: &[VstModel], draw_seed: u64) -> Result<Vec<FlatParams>> {
    trees
        .iter()
        .enumerate()
        .map(|(j, tree)| {
            let mut rng = rng::indexed_stream(draw_seed, "tree", j as u64);
            tree.sample_params(&mut rng)
        })
        .collect()
}

/// Ensemble mean (standardized units) of every row under fixed tree parameters.
pub(crate) fn ensemble_means(trees: &[VstModel], params: &[FlatParams], rows: &[&[f64]], shrinkage: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for (tree, theta) in trees.iter().zip(params) {
        let mut mass = vec![0.0; tree.spec.internal_count() + tree.spec.leaf_count()];
        for (o, x) in out.iter_mut().zip(rows) {
            *o += shrinkage * mean_unchecked(&tree.spec, theta.as_slice(), x, &mut mass);
        }
    }
    out
}

fn residuals(targets: &[f64], means: &[f64]) -> Vec<f64> {
    targets.iter().zip(means).map(|(y, f)| y - f).collect()
}

pub fn fit_vsgbm(data: &Dataset, config: &VsgbmConfig) -> Result<VsgbmFit> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid(format!("training needs at least 2 rows, got {}", data.len())));
    }
    let stats = Standardization::fit(data)?;
    if stats.constant_target && !config.tree.allow_constant_target {
        return Err(Error::invalid("target column has zero variance"));
    }
    let standardized = stats.transform(data)?;
    let rows = standardized.rows();
    let tree_config = config.tree_config();
    let seed = tree_config.seed;

    let mut trees: Vec<VstModel> = Vec::with_capacity(config.num_trees);
    let mut traces = Vec::with_capacity(config.num_trees);
    for t in 0..config.num_trees {
        let (target, tree_seed) = if t == 0 {
            (standardized.target.clone(), seed)
        } else {
            let draw = joint_tree_params(&trees, rng::indexed_seed(seed, "residual-draw", t as u64))?;
            let means = ensemble_means(&trees, &draw, &rows, config.shrinkage);
            (residuals(&standardized.target, &means), rng::indexed_seed(seed, "tree", t as u64))
        };
        let round = Dataset::with_columns(
            standardized.features().to_vec(),
            target,
            standardized.columns.clone(),
            standardized.target_name.clone(),
        )?;
        let (tree, trace) = fit_standardized(&round, &tree_config, stats.clone(), None, tree_seed)
            .map_err(|e| e.context(format!("tree {t}")))?;
        trees.push(tree);
        traces.push(trace);
    }

    let noise_prior = InverseGammaPosterior::new(config.a_sigma, config.b_sigma)?;
    let final_draw_seed = rng::stream_seed(seed, "final-draw");
    let draw = joint_tree_params(&trees, final_draw_seed)?;
    let r = residuals(&standardized.target, &ensemble_means(&trees, &draw, &rows, config.shrinkage));
    let noise_posterior = noise_prior.update(&r);
    let model = VsgbmModel {
        trees,
        noise_prior,
        noise_posterior,
        standardization: stats,
        shrinkage: config.shrinkage,
        n_train: data.len(),
        final_draw_seed,
    };
    Ok(VsgbmFit { model, traces })
}

impl VsgbmModel {
    pub fn feature_dim(&self) -> usize {
        self.standardization.n_features()
    }

    fn check_dim(&self, data: &Dataset) -> Result<()> {
        if data.n_features() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "data has {} features, model expects {}",
                data.n_features(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Standardized residuals of `data` under the joint draw used for the
    /// noise posterior. On the training data these reproduce the update.
    pub fn final_residuals(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_dim(data)?;
        let standardized = self.standardization.transform(data)?;
        let draw = joint_tree_params(&self.trees, self.final_draw_seed)?;
        let means = ensemble_means(&self.trees, &draw, &standardized.rows(), self.shrinkage);
        Ok(residuals(&standardized.target, &means))
    }

    /// Ensemble mean in standardized units with every tree at its posterior mean.
    pub fn posterior_mean_predictions(&self, data: &Dataset, num_trees: usize) -> Result<Vec<f64>> {
        self.check_dim(data)?;
        let standardized = self.standardization.transform(data)?;
        let count = num_trees.min(self.trees.len());
        let params: Vec<FlatParams> =
            self.trees[..count].iter().map(|t| FlatParams(t.posterior.mean().to_vec())).collect();
        Ok(ensemble_means(&self.trees[..count], &params, &standardized.rows(), self.shrinkage))
    }
}

/// One joint posterior function draw evaluated at the rows of `x`:
/// de-standardized means and the sampled observation-noise std.
pub fn vsgbm_function_sample(model: &VsgbmModel, x: &Dataset, seed: u64) -> Result<(Vec<f64>, f64)> {
    model.check_dim(x)?;
    let standardized = model.standardization.transform(x)?;
    let draw = joint_tree_params(&model.trees, rng::stream_seed(seed, "params"))?;
    let means = ensemble_means(&model.trees, &draw, &standardized.rows(), model.shrinkage);
    let var = sample_noise_variance(&model.noise_posterior, &mut rng::stream(seed, "noise"));
    let s = &model.standardization;
    Ok((
        means.into_iter().map(|m| s.inverse_target(m)).collect(),
        var.sqrt() * s.target_std,
    ))
}

impl VstModel {
    /// Parameters of one posterior draw.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FlatParams> {
        let noise = NoiseDraw::standard(rng, self.posterior.dim(), self.posterior.rank());
        Ok(FlatParams(self.posterior.sample(&noise.diag, &noise.lowrank)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, SynthKind};
    use crate::vst::fit_vst;

    fn config(trees: usize) -> VsgbmConfig {
        VsgbmConfig {
            num_trees: trees,
            tree: TrainConfig { depth: 2, rank: 1, steps: 150, batch_size: 64, learning_rate: 1e-2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn conjugate_formula() {
        let prior = InverseGammaPosterior::new(3.0, 1.0).unwrap();
        let r = [0.5; 10];
        let post = prior.update(&r);
        assert_eq!((post.shape, post.scale), (13.0, 3.5));
    }

    #[test]
    fn single_tree_equals_fit_vst() {
        let d = synth(SynthKind::Linear, 60, 0.1, 3).unwrap();
        let cfg = config(1);
        let boosted = fit_vsgbm(&d, &cfg).unwrap();
        let single = fit_vst(&d, &cfg.tree_config()).unwrap();
        assert_eq!(boosted.model.trees.len(), 1);
        assert_eq!(boosted.model.trees[0], single.model);
    }

    #[test]
    fn noise_update_matches_replayed_residuals() {
        let d = synth(SynthKind::Friedman, 80, 0.5, 1).unwrap();
        let cfg = config(3);
        let m = fit_vsgbm(&d, &cfg).unwrap().model;
        let r = m.final_residuals(&d).unwrap();
        assert_eq!(m.noise_posterior.shape - cfg.a_sigma, d.len() as f64);
        assert_eq!(m.noise_posterior.scale, cfg.b_sigma + sum_of_squares(&r));
    }

    #[test]
    fn samples_are_homoskedastic_and_deterministic() {
        let d = synth(SynthKind::TailLine, 60, 0.1, 2).unwrap();
        let m = fit_vsgbm(&d, &config(2)).unwrap().model;
        let grid = Dataset::from_rows(&[vec![-0.5], vec![1.5]], vec![0.0, 0.0]).unwrap();
        let (a, sa) = vsgbm_function_sample(&m, &grid, 9).unwrap();
        let (b, sb) = vsgbm_function_sample(&m, &grid, 9).unwrap();
        assert_eq!((a, sa), (b, sb));
        assert!(sa > 0.0);
        let bad = Dataset::from_rows(&[vec![0.0, 1.0]], vec![0.0]).unwrap();
        assert!(vsgbm_function_sample(&m, &bad, 0).is_err());
    }

    #[test]
    fn inverse_gamma_draws_concentrate() {
        let mut rng = crate::rng::stream(1, "ig");
        let mut spread = |shape: f64| {
            let post = InverseGammaPosterior::new(shape, 0.5 * shape).unwrap();
            let draws: Vec<f64> = (0..2000).map(|_| sample_noise_variance(&post, &mut rng)).collect();
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / draws.len() as f64).sqrt()
        };
        let wide = spread(5.0);
        let narrow = spread(5000.0);
        assert!(narrow < wide / 10.0);
        let post = InverseGammaPosterior::new(13.0, 3.5).unwrap();
        let a = sample_noise_variance(&post, &mut crate::rng::stream(4, "x"));
        let b = sample_noise_variance(&post, &mut crate::rng::stream(4, "x"));
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let d = synth(SynthKind::Linear, 20, 0.1, 0).unwrap();
        let mut cfg = config(0);
        assert!(fit_vsgbm(&d, &cfg).is_err());
        cfg.num_trees = 1;
        cfg.a_sigma = 0.5;
        assert!(fit_vsgbm(&d, &cfg).is_err());
    }

    fn frozen(tree: &VstModel, scale: f64) -> VstModel {
        let mut t = tree.clone();
        t.posterior.mean_mut().iter_mut().for_each(|m| *m *= scale);
        t.posterior.diag_raw_mut().iter_mut().for_each(|r| *r = -1e4);
        t.posterior.factor_mut().iter_mut().for_each(|v| *v = 0.0);
        t
    }

    fn grid() -> Vec<Vec<f64>> {
        (0..9).map(|i| vec![-1.0 + 0.25 * i as f64]).collect()
    }

    #[test]
    fn prediction_is_sum_of_trees() {
        let d = synth(SynthKind::TailLine, 80, 0.1, 5).unwrap();
        let m = fit_vsgbm(&d, &config(3)).unwrap().model;
        let params = joint_tree_params(&m.trees, 17).unwrap();
        let rows = grid();
        let rows: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let total = ensemble_means(&m.trees, &params, &rows, m.shrinkage);
        for (i, x) in rows.iter().enumerate() {
            let sum: f64 = m
                .trees
                .iter()
                .zip(&params)
                .map(|(t, p)| crate::soft_tree::predict_mean(&t.spec, p, x).unwrap())
                .sum();
            assert!((total[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_second_tree_reduces_to_first() {
        let d = synth(SynthKind::TailLine, 80, 0.1, 6).unwrap();
        let mut m = fit_vsgbm(&d, &config(2)).unwrap().model;
        m.trees[1] = frozen(&m.trees[1], 0.0);
        let mut single = m.clone();
        single.trees.truncate(1);
        let x = Dataset::from_rows(&grid(), vec![0.0; 9]).unwrap();
        for seed in 0..5 {
            assert_eq!(vsgbm_function_sample(&m, &x, seed).unwrap(), vsgbm_function_sample(&single, &x, seed).unwrap());
        }
    }

    #[test]
    fn point_mass_trees_ignore_param_seed() {
        let d = synth(SynthKind::TailLine, 80, 0.1, 7).unwrap();
        let mut m = fit_vsgbm(&d, &config(2)).unwrap().model;
        m.trees = m.trees.iter().map(|t| frozen(t, 1.0)).collect();
        let x = Dataset::from_rows(&grid(), vec![0.0; 9]).unwrap();
        let (a, sa) = vsgbm_function_sample(&m, &x, 1).unwrap();
        let (b, sb) = vsgbm_function_sample(&m, &x, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(sa, sb);
    }

    #[test]
    fn sample_average_tracks_noiseless_line() {
        let d = synth(SynthKind::Linear, 200, 0.0, 8).unwrap();
        let cfg = VsgbmConfig {
            num_trees: 2,
            tree: TrainConfig {
                depth: 1,
                rank: 1,
                steps: 3000,
                batch_size: 64,
                learning_rate: 1e-2,
                mean_only_noise_std: 0.1,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = fit_vsgbm(&d, &cfg).unwrap().model;
        let x = Dataset::from_rows(&[vec![-0.5], vec![0.0], vec![0.6]], vec![0.0; 3]).unwrap();
        let mut avg = [0.0; 3];
        for seed in 0..256 {
            let (f, _) = vsgbm_function_sample(&m, &x, seed).unwrap();
            avg.iter_mut().zip(f).for_each(|(a, v)| *a += v / 256.0);
        }
        for (a, x) in avg.iter().zip([-0.5, 0.0, 0.6]) {
            assert!((a - (2.0 * x + 1.0)).abs() < 0.05, "{a} at {x}");
        }
    }
}

//! Versioned JSON persistence for fitted models.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! saved and reloaded model reproduces every prediction bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::lowrank::{IsotropicPrior, LowRankGaussian};
use crate::predictive::Model;
use crate::soft_tree::SoftTreeSpec;
use crate::vsgbm::{InverseGammaPosterior, VsgbmModel};
use crate::vst::VstModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vst,
    Vsgbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub p: usize,
    pub k: usize,
    pub mean: Vec<f64>,
    pub diag_raw: Vec<f64>,
    /// Row-major `p × k`.
    pub factor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub spec: SoftTreeSpec,
    pub prior_variance: f64,
    pub posterior: PosteriorRecord,
    pub mean_only_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub prior: InverseGammaPosterior,
    pub posterior: InverseGammaPosterior,
    pub shrinkage: f64,
    pub n_train: usize,
    pub final_draw_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub trees: Vec<TreeRecord>,
    pub standardization: Standardization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseRecord>,
    /// Echo of the training configuration, kept for provenance only.
    #[serde(default)]
    pub training: serde_json::Value,
    pub seed: u64,
}

fn tree_record(m: &VstModel) -> TreeRecord {
    TreeRecord {
        spec: m.spec,
        prior_variance: m.prior.variance,
        posterior: PosteriorRecord {
            p: m.posterior.dim(),
            k: m.posterior.rank(),
            mean: m.posterior.mean().to_vec(),
            diag_raw: m.posterior.diag_raw().to_vec(),
            factor: m.posterior.factor().to_vec(),
        },
        mean_only_noise_std: m.mean_only_noise_std,
    }
}

fn tree_model(r: &TreeRecord, standardization: &Standardization) -> Result<VstModel> {
    let spec = SoftTreeSpec::new(r.spec.depth, r.spec.feature_dim, r.spec.leaf_kind, r.spec.beta, r.spec.output_mode)?;
    let post = &r.posterior;
    if post.p != spec.param_count() {
        return Err(Error::format(format!(
            "posterior dimension {} does not match the tree's {} parameters",
            post.p,
            spec.param_count()
        )));
    }
    if post.factor.len() != post.p * post.k {
        return Err(Error::format(format!("factor has {} entries, expected {}", post.factor.len(), post.p * post.k)));
    }
    if standardization.n_features() != spec.feature_dim {
        return Err(Error::format("standardization and tree disagree on the feature count"));
    }
    let posterior = LowRankGaussian::new(post.mean.clone(), post.diag_raw.clone(), post.factor.clone(), post.k)?;
    Ok(VstModel {
        spec,
        posterior,
        prior: IsotropicPrior::new(r.prior_variance)?,
        standardization: standardization.clone(),
        mean_only_noise_std: r.mean_only_noise_std,
    })
}

impl ModelFile {
    pub fn from_model(model: &Model, training: serde_json::Value, seed: u64) -> Self {
        match model {
            Model::Vst(m) => Self {
                format_version: FORMAT_VERSION,
                model_kind: ModelKind::Vst,
                trees: vec![tree_record(m)],
                standardization: m.standardization.clone(),
                noise: None,
                training,
                seed,
            },
            Model::Vsgbm(m) => Self {
                format_version: FORMAT_VERSION,
                model_kind: ModelKind::Vsgbm,
                trees: m.trees.iter().map(tree_record).collect(),
                standardization: m.standardization.clone(),
                noise: Some(NoiseRecord {
                    prior: m.noise_prior,
                    posterior: m.noise_posterior,
                    shrinkage: m.shrinkage,
                    n_train: m.n_train,
                    final_draw_seed: m.final_draw_seed,
                }),
                training,
                seed,
            },
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let trees = self
            .trees
            .iter()
            .map(|t| tree_model(t, &self.standardization))
            .collect::<Result<Vec<_>>>()?;
        match self.model_kind {
            ModelKind::Vst => {
                if trees.len() != 1 || self.noise.is_some() {
                    return Err(Error::format("a vst model holds exactly one tree and no noise posterior"));
                }
                Ok(Model::Vst(trees.into_iter().next().expect("one tree")))
            }
            ModelKind::Vsgbm => {
                let noise = self.noise.as_ref().ok_or_else(|| Error::format("vsgbm model lacks its noise posterior"))?;
                if trees.is_empty() {
                    return Err(Error::format("vsgbm model has no trees"));
                }
                InverseGammaPosterior::new(noise.posterior.shape, noise.posterior.scale)?;
                Ok(Model::Vsgbm(VsgbmModel {
                    trees,
                    noise_prior: noise.prior,
                    noise_posterior: noise.posterior,
                    standardization: self.standardization.clone(),
                    shrinkage: noise.shrinkage,
                    n_train: noise.n_train,
                    final_draw_seed: noise.final_draw_seed,
                }))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::format(format!("unsupported model format version {v} (expected {FORMAT_VERSION})")))
            }
            None => return Err(Error::format("missing format_version")),
        }
        serde_json::from_value(value).map_err(|e| Error::format(e.to_string()))
    }
}

pub fn save_model(model: &Model, training: serde_json::Value, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let text = ModelFile::from_model(model, training, seed).to_json()?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    ModelFile::from_json(&text).map_err(|e| e.context(path.display().to_string()))
}

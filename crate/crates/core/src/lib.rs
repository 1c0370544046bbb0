//! Variational soft decision trees (VST) and gradient-boosted ensembles of
//! them (VSGBM) for probabilistic regression.
//!
//! Each tree carries a Gaussian posterior with diagonal-plus-low-rank
//! covariance over all of its gating and leaf parameters, fitted by
//! maximising the evidence lower bound with exact reparameterized
//! gradients. Predictions integrate over posterior draws by Monte Carlo.

pub mod activation;
pub mod adam;
pub mod bandit;
pub mod data;
pub mod error;
pub mod gradient;
pub mod lowrank;
pub mod model_file;
pub mod ood;
pub mod predictive;
pub mod rng;
pub mod soft_tree;
pub mod vsgbm;
pub mod vst;

pub use data::{Dataset, Standardization, SynthKind};
pub use error::{Error, Result};
pub use lowrank::{IsotropicPrior, LowRankGaussian};
pub use predictive::{PosteriorModel, PredictiveSummary};
pub use soft_tree::{FlatParams, LeafKind, OutputMode, SoftTreeSpec};
pub use vsgbm::{VsgbmConfig, VsgbmModel};
pub use vst::{TrainConfig, VstModel};

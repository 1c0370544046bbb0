//! Contextual bandits with Thompson sampling over per-arm variational trees.
//!
//! Regret is measured against the best noiseless expected reward:
//! `regret_t = max_a E[r(x_t, a)] - E[r(x_t, a_t)]`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::sigmoid;
use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::soft_tree::mean_unchecked;
use crate::vst::{fit_vst_with, TrainConfig, VstModel};

/// One smooth unit "bump" of reward per arm on contexts uniform in `[-1, 1]`:
/// `r(x, a) = σ(β(x + α - offset[a])) - σ(β(x - α - offset[a])) + ε`, `ε ~ N(0, δ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationEnv {
    pub alpha: f64,
    pub beta_env: f64,
    pub delta: f64,
    pub offsets: Vec<f64>,
}

impl Default for ExplorationEnv {
    fn default() -> Self {
        Self::evenly_spaced(8, 0.2, 50.0, 0.01).expect("valid defaults")
    }
}

impl ExplorationEnv {
    /// `arms` offsets evenly spaced over `[-0.9, 0.9]`.
    pub fn evenly_spaced(arms: usize, alpha: f64, beta_env: f64, delta: f64) -> Result<Self> {
        let offsets = match arms {
            0 => return Err(Error::invalid("need at least one arm")),
            1 => vec![0.0],
            _ => (0..arms).map(|a| -0.9 + 1.8 * a as f64 / (arms - 1) as f64).collect(),
        };
        Self::new(alpha, beta_env, delta, offsets)
    }

    pub fn new(alpha: f64, beta_env: f64, delta: f64, offsets: Vec<f64>) -> Result<Self> {
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::invalid("delta must be non-negative"));
        }
        if offsets.is_empty() {
            return Err(Error::invalid("need at least one arm"));
        }
        for (i, a) in offsets.iter().enumerate() {
            if offsets[..i].contains(a) {
                return Err(Error::invalid("arm offsets must be distinct"));
            }
        }
        Ok(Self { alpha, beta_env, delta, offsets })
    }

    pub fn num_arms(&self) -> usize {
        self.offsets.len()
    }

    pub fn mean_reward(&self, x: f64, arm: usize) -> f64 {
        let o = self.offsets[arm];
        sigmoid(self.beta_env * (x + self.alpha - o)) - sigmoid(self.beta_env * (x - self.alpha - o))
    }
}

/// Reward of `arm` at context `x` with the additive noise supplied.
pub fn exploration_reward(env: &ExplorationEnv, x: f64, arm: usize, noise: f64) -> Result<f64> {
    if arm >= env.num_arms() {
        return Err(Error::invalid(format!("arm {arm} out of range for {} arms", env.num_arms())));
    }
    Ok(env.mean_reward(x, arm) + noise)
}

/// Arms whose expected reward is a fixed linear combination of a Gaussian context.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPortfolioEnv {
    pub feature_dim: usize,
    /// Row-major `arms × feature_dim`.
    pub weights: Vec<f64>,
    pub num_arms: usize,
    pub noise_std: f64,
    pub context_std: f64,
}

impl LinearPortfolioEnv {
    /// Weights drawn from `N(0, 1/d)` under `seed`.
    pub fn generate(feature_dim: usize, num_arms: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_arms == 0 {
            return Err(Error::invalid("portfolio needs at least one feature and one arm"));
        }
        let mut rng = rng::stream(seed, "portfolio-weights");
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let weights = (0..feature_dim * num_arms)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self { feature_dim, weights, num_arms, noise_std, context_std: 1.0 })
    }

    pub fn mean_reward(&self, x: &[f64], arm: usize) -> f64 {
        let w = &self.weights[arm * self.feature_dim..(arm + 1) * self.feature_dim];
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Logged contexts and per-arm rewards replayed in a shuffled cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEnv {
    pub contexts: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
}

impl ReplayEnv {
    pub fn new(contexts: Vec<Vec<f64>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        if contexts.is_empty() || contexts.len() != rewards.len() {
            return Err(Error::data("replay needs equal, non-zero context and reward row counts"));
        }
        let d = contexts[0].len();
        let k = rewards[0].len();
        if d == 0 || k == 0 || contexts.iter().any(|c| c.len() != d) || rewards.iter().any(|r| r.len() != k) {
            return Err(Error::data("replay rows are ragged or empty"));
        }
        Ok(Self { contexts, rewards })
    }

    /// Columns named `reward_*` are arm rewards, all others context features.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let is_reward: Vec<bool> = header.iter().map(|h| h.starts_with("reward_")).collect();
        if !is_reward.iter().any(|&r| r) {
            return Err(Error::data("replay table has no reward_* columns"));
        }
        let mut contexts = Vec::new();
        let mut rewards = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let mut c = Vec::new();
            let mut r = Vec::new();
            for (col, cell) in rec.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::data(format!("row {}, column '{}': cannot parse '{cell}'", row + 1, header[col]))
                })?;
                if is_reward[col] {
                    r.push(v);
                } else {
                    c.push(v);
                }
            }
            contexts.push(c);
            rewards.push(r);
        }
        Self::new(contexts, rewards)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Exploration(ExplorationEnv),
    Portfolio(LinearPortfolioEnv),
    Replay(ReplayEnv),
}

/// Context of one round with the expected reward of every arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub context: Vec<f64>,
    pub expected: Vec<f64>,
}

impl Environment {
    pub fn num_arms(&self) -> usize {
        match self {
            Environment::Exploration(e) => e.num_arms(),
            Environment::Portfolio(e) => e.num_arms,
            Environment::Replay(e) => e.rewards[0].len(),
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            Environment::Exploration(_) => 1,
            Environment::Portfolio(e) => e.feature_dim,
            Environment::Replay(e) => e.contexts[0].len(),
        }
    }

    /// Fixed input scaling for the agent's models.
    pub fn standardization(&self) -> Standardization {
        match self {
            Environment::Replay(e) => {
                let data = Dataset::from_rows(&e.contexts, vec![0.0; e.contexts.len()])
                    .expect("validated replay contexts");
                let fitted = Standardization::fit(&data).expect("non-empty replay");
                Standardization { target_mean: 0.0, target_std: 1.0, constant_target: false, ..fitted }
            }
            _ => Standardization::identity(self.context_dim()),
        }
    }

    fn observe(&self, step: usize, order: &[usize], rng: &mut StreamRng) -> Round {
        match self {
            Environment::Exploration(e) => {
                let x: f64 = rng.random_range(-1.0..1.0);
                Round { expected: (0..e.num_arms()).map(|a| e.mean_reward(x, a)).collect(), context: vec![x] }
            }
            Environment::Portfolio(e) => {
                let context: Vec<f64> = (0..e.feature_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * e.context_std
                    })
                    .collect();
                Round { expected: (0..e.num_arms).map(|a| e.mean_reward(&context, a)).collect(), context }
            }
            Environment::Replay(e) => {
                let row = order[step % order.len()];
                Round { context: e.contexts[row].clone(), expected: e.rewards[row].clone() }
            }
        }
    }

    fn noise_std(&self) -> f64 {
        match self {
            Environment::Exploration(e) => e.delta,
            Environment::Portfolio(e) => e.noise_std,
            Environment::Replay(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Random,
    /// Knows the expected rewards; zero regret by construction.
    Oracle,
    /// Thompson sampling over one variational soft tree per arm.
    Vst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub retrain_every: usize,
    pub warm_start: bool,
    /// Settings for each arm's tree; `steps` applies to cold fits.
    pub train: TrainConfig,
    /// Optimisation steps of a warm-started refit.
    pub warm_steps: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Vst,
            retrain_every: 50,
            warm_start: true,
            train: TrainConfig { depth: 3, rank: 2, steps: 500, learning_rate: 1e-2, ..TrainConfig::default() },
            warm_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditStep {
    pub context: Vec<f64>,
    /// Per-arm Thompson sample values (empty for non-sampling agents).
    pub sampled_values: Vec<f64>,
    pub arm: usize,
    pub reward: f64,
    pub optimal_expected: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditTrace {
    pub steps: Vec<BanditStep>,
    pub cumulative_regret: Vec<f64>,
}

impl BanditTrace {
    pub fn final_regret(&self) -> f64 {
        self.cumulative_regret.last().copied().unwrap_or(0.0)
    }

    /// Table with columns `step,arm,reward,regret,cumulative_regret`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,arm,reward,regret,cumulative_regret")?;
        for (t, (s, c)) in self.steps.iter().zip(&self.cumulative_regret).enumerate() {
            writeln!(w, "{t},{},{},{},{}", s.arm, s.reward, s.regret, c)?;
        }
        Ok(())
    }
}

/// Pick the arm whose single posterior draw has the largest mean at `x`
/// (original reward units). Ties go to the lowest index.
pub fn thompson_step(models: &[VstModel], x: &[f64], seed: u64) -> Result<(usize, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::invalid("thompson sampling needs at least one arm"));
    }
    let mut values = Vec::with_capacity(models.len());
    for (a, m) in models.iter().enumerate() {
        m.spec.check_input(x)?;
        let params = m.sample_params(&mut rng::indexed_stream(seed, "thompson", a as u64))?;
        let z = m.standardization.features(x);
        let mut mass = vec![0.0; m.spec.internal_count() + m.spec.leaf_count()];
        let f = mean_unchecked(&m.spec, params.as_slice(), &z, &mut mass);
        values.push(m.standardization.inverse_target(f));
    }
    Ok((argmax(&values), values))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct ArmHistory {
    contexts: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    dirty: bool,
}

pub fn run_bandit(env: &Environment, agent: &AgentConfig, horizon: usize, seed: u64) -> Result<BanditTrace> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if agent.kind == AgentKind::Vst {
        agent.train.validate()?;
        if agent.retrain_every == 0 {
            return Err(Error::invalid("retrain_every must be at least 1"));
        }
    }
    let k = env.num_arms();
    let mut context_rng = rng::stream(seed, "bandit-context");
    let mut noise_rng = rng::stream(seed, "bandit-noise");
    let mut policy_rng = rng::stream(seed, "bandit-policy");
    let noise = Normal::new(0.0, env.noise_std()).map_err(|e| Error::invalid(e.to_string()))?;
    let order: Vec<usize> = match env {
        Environment::Replay(e) => {
            use rand::seq::SliceRandom;
            let mut o: Vec<usize> = (0..e.contexts.len()).collect();
            o.shuffle(&mut rng::stream(seed, "bandit-replay-order"));
            o
        }
        _ => Vec::new(),
    };
    let scaling = env.standardization();
    let mut history: Vec<ArmHistory> =
        (0..k).map(|_| ArmHistory { contexts: Vec::new(), rewards: Vec::new(), dirty: false }).collect();
    let mut models: Vec<Option<VstModel>> = vec![None; k];

    let mut steps = Vec::with_capacity(horizon);
    let mut cumulative = Vec::with_capacity(horizon);
    let mut total = 0.0;
    for t in 0..horizon {
        let round = env.observe(t, &order, &mut context_rng);
        let (arm, sampled_values) = match agent.kind {
            AgentKind::Random => (policy_rng.random_range(0..k), Vec::new()),
            AgentKind::Oracle => (argmax(&round.expected), Vec::new()),
            AgentKind::Vst => {
                let fewest = (0..k).min_by_key(|&a| history[a].rewards.len()).unwrap_or(0);
                if history[fewest].rewards.len() < 2 {
                    (fewest, Vec::new())
                } else {
                    let fitted: Vec<VstModel> = models.iter().map(|m| m.clone().expect("all arms fitted")).collect();
                    thompson_step(&fitted, &round.context, rng::indexed_seed(seed, "thompson-step", t as u64))
                        .map_err(|e| e.context(format!("step {t}")))?
                }
            }
        };
        let eps = if env.noise_std() > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
        let reward = round.expected[arm] + eps;
        let optimal = round.expected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let regret = (optimal - round.expected[arm]).max(0.0);
        total += regret;
        cumulative.push(total);

        if agent.kind == AgentKind::Vst {
            let h = &mut history[arm];
            h.contexts.push(round.context.clone());
            h.rewards.push(reward);
            h.dirty = true;
            let ready = history.iter().all(|h| h.rewards.len() >= 2);
            let missing = models.iter().any(|m| m.is_none());
            if ready && (missing || (t + 1) % agent.retrain_every == 0) {
                for a in 0..k {
                    if !history[a].dirty && models[a].is_some() {
                        continue;
                    }
                    let fit = fit_arm(&history[a], &models[a], agent, &scaling, rng::indexed_seed(seed, "arm-fit", (t * k + a) as u64))
                        .map_err(|e| e.context(format!("step {t}, arm {a}")))?;
                    models[a] = Some(fit);
                    history[a].dirty = false;
                }
            }
        }
        steps.push(BanditStep {
            context: round.context,
            sampled_values,
            arm,
            reward,
            optimal_expected: optimal,
            regret,
        });
    }
    Ok(BanditTrace { steps, cumulative_regret: cumulative })
}

fn fit_arm(
    history: &ArmHistory,
    previous: &Option<VstModel>,
    agent: &AgentConfig,
    scaling: &Standardization,
    seed: u64,
) -> Result<VstModel> {
    let data = Dataset::from_rows(&history.contexts, history.rewards.clone())?;
    let warm = previous.as_ref().filter(|_| agent.warm_start).map(|m| &m.posterior);
    let steps = if warm.is_some() { agent.warm_steps } else { agent.train.steps };
    let config = TrainConfig { steps, seed, log_every: 0, ..agent.train.clone() };
    Ok(fit_vst_with(&data, &config, scaling.clone(), warm)?.model)
}

//! Weighted value-targeted regression agent and its baselines.
//!
//! The agent keeps `M + 1` regression levels. Level `m` regresses
//! `V_{k,h+1}^{2^m}(s_{h+1})` on `φ_{V^{2^m}}(s_h, a_h)` with weights `1/σ̄²`
//! chosen by the high-order moment estimator ([`home`]). Level 0 drives
//! optimistic planning ([`plan`]).
//!
//! Agents plan on rewards divided by `H`, so every return lies in `[0, 1]`,
//! whatever reward mode the environment reports in.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::env::{argmax, EpisodicMdp, Policy, RewardMode, Step, ValueTable};
use crate::error::{Error, Result};
use crate::model::{
    oracle_fit, BlockFeature, DatasetSummary, FactoredSummary, FeatureMap, LinearMixtureModel, ValueVector,
};
use crate::uncertainty::{
    default_upper_bound, potential_term, uncertainty_general, uncertainty_linear, uncertainty_live, BallLinearOracle,
    UncertaintyProblem,
};

/// Confidence radius `β̂_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BonusSchedule {
    Constant {
        beta: f64,
    },
    /// `β̂_k = 3√ι_k + 2ι_k/γ² + √λ + √(6kHε/σ_min²)` with
    /// `ι_k = 16·log(2·N·k²H²·(log(kH/σ_min²)+2)·(log(1/σ_min²)+2)/δ)`.
    Theoretical {
        /// `log N_F(ε)`.
        log_covering: f64,
        delta: f64,
        epsilon: f64,
    },
}

/// Where the factor 2 sits in the HOME error width `E_{k,h,m}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorWidth {
    /// `min{1, 2β̂·D(z_{m+1})} + min{1, β̂·D(z_m)}`.
    #[default]
    NextLevelDoubled,
    /// `min{1, β̂·D(z_{m+1})} + min{1, 2β̂·D(z_m)}`.
    CurrentLevelDoubled,
}

/// How `D_F` is evaluated inside the agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UncertaintyBackend {
    /// Closed form `‖φ‖_{Σ⁻¹}`.
    #[default]
    Linear,
    /// Doubling and binary search over a ball-constrained regression oracle.
    /// Bonuses use `√2·D̃`.
    Oracle { precision: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub lambda: f64,
    pub sigma_min: f64,
    pub gamma: f64,
    pub bonus: BonusSchedule,
    /// Highest moment level `M`.
    pub levels: usize,
    #[serde(default)]
    pub error_width: ErrorWidth,
    #[serde(default)]
    pub backend: UncertaintyBackend,
}

impl AgentConfig {
    /// Full weighted agent with the high-order moment estimator.
    pub fn wvtr() -> Self {
        Self {
            lambda: 0.001,
            sigma_min: 0.01,
            gamma: 0.5,
            bonus: BonusSchedule::Constant { beta: 1.0 },
            levels: 3,
            error_width: ErrorWidth::default(),
            backend: UncertaintyBackend::default(),
        }
    }

    /// Weighted agent with a single variance level.
    pub fn no_home() -> Self {
        Self {
            levels: 1,
            ..Self::wvtr()
        }
    }

    /// Unweighted value-targeted regression.
    pub fn vtr() -> Self {
        Self {
            lambda: 0.001,
            sigma_min: 1.0,
            gamma: 0.0,
            bonus: BonusSchedule::Constant { beta: 1.0 },
            levels: 0,
            error_width: ErrorWidth::default(),
            backend: UncertaintyBackend::default(),
        }
    }

    /// `M = ⌈log₂(3KH)⌉`.
    pub fn theoretical_levels(episodes: usize, horizon: usize) -> usize {
        ((3 * episodes * horizon) as f64).log2().ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("sigma_min", self.sigma_min)?;
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.gamma == 0.0 && self.levels > 0 {
            return Err(Error::Config("gamma = 0 is only allowed with M = 0".into()));
        }
        match self.bonus {
            BonusSchedule::Constant { beta } => {
                if !beta.is_finite() || beta < 0.0 {
                    return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
                }
            }
            BonusSchedule::Theoretical {
                log_covering,
                delta,
                epsilon,
            } => {
                positive("log_covering", log_covering)?;
                positive("epsilon", epsilon)?;
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
                }
                if self.gamma == 0.0 {
                    return Err(Error::Config("the theoretical schedule needs gamma > 0".into()));
                }
            }
        }
        if let UncertaintyBackend::Oracle { precision } = self.backend {
            positive("precision", precision)?;
        }
        Ok(())
    }

    /// `β̂_k` for the one-based episode index `k`.
    pub fn bonus_at(&self, episode: usize, horizon: usize) -> f64 {
        match self.bonus {
            BonusSchedule::Constant { beta } => beta,
            BonusSchedule::Theoretical {
                log_covering,
                delta,
                epsilon,
            } => {
                let (k, h) = (episode.max(1) as f64, horizon as f64);
                let s2 = self.sigma_min * self.sigma_min;
                let iota = 16.0
                    * (std::f64::consts::LN_2
                        + log_covering
                        + 2.0 * (k * h).ln()
                        + ((k * h / s2).max(1.0).ln() + 2.0).ln()
                        + ((1.0 / s2).max(1.0).ln() + 2.0).ln()
                        - delta.ln());
                3.0 * iota.sqrt()
                    + 2.0 * iota / (self.gamma * self.gamma)
                    + self.lambda.sqrt()
                    + (6.0 * k * h * epsilon / s2).sqrt()
            }
        }
    }
}

/// One regression level: live data, episode-start snapshot and fitted model.
#[derive(Clone, Debug)]
pub struct LevelState {
    level: usize,
    live: DatasetSummary,
    snapshot: FactoredSummary,
    model: LinearMixtureModel,
    /// Dense `(φ, σ̄)` pairs, kept only for the oracle backend.
    history: Vec<(DVector<f64>, f64)>,
    snapshot_len: usize,
}

impl LevelState {
    pub fn new(level: usize, features: &FeatureMap, lambda: f64) -> Result<Self> {
        let live = DatasetSummary::new(features.layout(), lambda)?;
        let snapshot = live.factor()?;
        Ok(Self {
            level,
            live,
            snapshot,
            model: LinearMixtureModel::zero(features.clone()),
            history: Vec::new(),
            snapshot_len: 0,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn model(&self) -> &LinearMixtureModel {
        &self.model
    }

    pub fn live(&self) -> &DatasetSummary {
        &self.live
    }

    pub fn snapshot(&self) -> &FactoredSummary {
        &self.snapshot
    }

    fn snapshot_uncertainty(&self, feature: &BlockFeature, config: &AgentConfig) -> Result<f64> {
        match config.backend {
            UncertaintyBackend::Linear => Ok(uncertainty_linear(&self.snapshot, feature)),
            UncertaintyBackend::Oracle { precision } => {
                Ok(self.oracle_uncertainty(self.snapshot_len, feature, config, precision)? * std::f64::consts::SQRT_2)
            }
        }
    }

    fn live_uncertainty(&self, feature: &BlockFeature, config: &AgentConfig) -> Result<f64> {
        match config.backend {
            UncertaintyBackend::Linear => uncertainty_live(&self.live, feature),
            UncertaintyBackend::Oracle { precision } => {
                Ok(self.oracle_uncertainty(self.history.len(), feature, config, precision)? * std::f64::consts::SQRT_2)
            }
        }
    }

    fn oracle_uncertainty(
        &self,
        upto: usize,
        feature: &BlockFeature,
        config: &AgentConfig,
        precision: f64,
    ) -> Result<f64> {
        let layout = self.model.features().layout();
        let (points, sigmas): (Vec<DVector<f64>>, Vec<f64>) = self.history[..upto].iter().cloned().unzip();
        let problem = UncertaintyProblem {
            history: &points,
            sigmas: &sigmas,
            lambda: config.lambda,
            upper_bound: default_upper_bound(upto, config.sigma_min, config.lambda),
            precision,
        };
        let query = feature.to_dense(layout);
        Ok(uncertainty_general(&problem, &query, &mut BallLinearOracle::default())?.value)
    }

    fn record(&mut self, feature: &BlockFeature, sigma_bar: f64, target: f64, keep_history: bool) -> Result<()> {
        self.live.add(feature, 1.0 / sigma_bar, target)?;
        if keep_history {
            let layout = self.model.features().layout();
            self.history.push((feature.to_dense(layout), sigma_bar));
        }
        Ok(())
    }

    /// Refits the model on all accumulated data and refreshes the snapshot.
    fn refit(&mut self) -> Result<()> {
        let theta = oracle_fit(&self.live)?;
        self.model.set_parameters(theta);
        self.snapshot = self.live.factor()?;
        self.snapshot_len = self.history.len();
        Ok(())
    }
}

/// Optimistic Q and V tables with the greedy policy.
#[derive(Clone, Debug)]
pub struct PlanResult {
    n_states: usize,
    n_actions: usize,
    /// `Q_h(s,a)` at `(h * |S| + s) * |A| + a`.
    q: Vec<f64>,
    pub values: ValueTable,
    pub policy: Policy,
}

impl PlanResult {
    pub fn q(&self, h: usize, state: usize, action: usize) -> f64 {
        self.q[(h * self.n_states + state) * self.n_actions + action]
    }
}

/// Backward optimistic value iteration on the level-0 model with bonus
/// `β̂·D(·; snapshot)`, clipped at 1. Ties go to the lowest action.
pub fn plan(
    level0: &LevelState,
    config: &AgentConfig,
    bonus: f64,
    horizon: usize,
    rewards: &[f64],
) -> Result<PlanResult> {
    let features = level0.model.features();
    let (ns, na) = (features.n_states(), features.n_actions());
    let mut values = ValueTable::zeros(horizon, ns);
    let mut q = vec![0.0; horizon * ns * na];
    let mut actions = vec![vec![0; ns]; horizon];
    for h in (0..horizon).rev() {
        let next = ValueVector::clamped(values.row(h + 1));
        for s in 0..ns {
            let row = &mut q[(h * ns + s) * na..(h * ns + s + 1) * na];
            for (a, slot) in row.iter_mut().enumerate() {
                let phi = features.phi_v(s, a, &next);
                let mean = level0.model.predict_feature(&phi);
                let width = if bonus > 0.0 {
                    bonus * level0.snapshot_uncertainty(&phi, config)?
                } else {
                    0.0
                };
                *slot = (rewards[s * na + a] + mean + width).min(1.0);
            }
            let best = argmax(row);
            actions[h][s] = best;
            values.set(h, s, row[best]);
        }
    }
    Ok(PlanResult {
        n_states: ns,
        n_actions: na,
        q,
        values,
        policy: Policy::Deterministic(actions),
    })
}

/// Per-level weights for one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct HomeOutput {
    /// `σ̄²_{k,h,m}` for `m = 0..=M`.
    pub sigma_sq: Vec<f64>,
    /// `φ_{V^{2^m}}(s,a)` for every level.
    pub features: Vec<BlockFeature>,
    /// `D(z_m; live data)` for every level.
    pub live_uncertainty: Vec<f64>,
    /// `f̂_{m+1}(z_{m+1}) − f̂_m(z_m)²` for `m < M`.
    pub variance_estimate: Vec<f64>,
}

/// High-order moment estimator: variance-aware and uncertainty-aware
/// weights for every level.
pub fn home(
    levels: &[LevelState],
    config: &AgentConfig,
    bonus: f64,
    state: usize,
    action: usize,
    next_values: &ValueVector,
) -> Result<HomeOutput> {
    let top = levels.len() - 1;
    let features: Vec<BlockFeature> = levels
        .iter()
        .map(|l| l.model.features().phi_v(state, action, &next_values.moment(l.level)))
        .collect();
    let predictions: Vec<f64> = levels
        .iter()
        .zip(&features)
        .map(|(l, phi)| l.model.predict_feature(phi))
        .collect();
    let snapshot_d = levels
        .iter()
        .zip(&features)
        .map(|(l, phi)| l.snapshot_uncertainty(phi, config))
        .collect::<Result<Vec<f64>>>()?;
    let live_d = levels
        .iter()
        .zip(&features)
        .map(|(l, phi)| l.live_uncertainty(phi, config))
        .collect::<Result<Vec<f64>>>()?;

    let floor = config.sigma_min * config.sigma_min;
    let gamma_sq = config.gamma * config.gamma;
    let mut sigma_sq = Vec::with_capacity(levels.len());
    let mut variance_estimate = Vec::with_capacity(top);
    for m in 0..top {
        let variance = predictions[m + 1] - predictions[m] * predictions[m];
        let (next_factor, cur_factor) = match config.error_width {
            ErrorWidth::NextLevelDoubled => (2.0, 1.0),
            ErrorWidth::CurrentLevelDoubled => (1.0, 2.0),
        };
        let width = (next_factor * bonus * snapshot_d[m + 1]).min(1.0) + (cur_factor * bonus * snapshot_d[m]).min(1.0);
        variance_estimate.push(variance);
        sigma_sq.push((variance + width).max(floor).max(gamma_sq * live_d[m]));
    }
    sigma_sq.push(1.0_f64.max(floor).max(gamma_sq * live_d[top]));

    Ok(HomeOutput {
        sigma_sq,
        features,
        live_uncertainty: live_d,
        variance_estimate,
    })
}

/// What the agent committed to for the coming episode.
#[derive(Clone, Debug)]
pub struct EpisodePlan {
    pub policy: Policy,
    /// Planned optimistic values `V_{k,h}` in the agent's `[0, 1]` scale.
    pub values: Option<ValueTable>,
}

/// Level-0 quantities recorded for one transition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    pub sigma_bar: Option<f64>,
    /// `min{1, D²/σ̄²}` against the live level-0 data.
    pub potential: Option<f64>,
}

/// Interface shared by every learner the harness can drive.
pub trait Agent: Send {
    fn begin_episode(&mut self) -> Result<EpisodePlan>;

    /// Feeds transition `h` of the current episode.
    fn observe(&mut self, h: usize, step: &Step) -> Result<StepDiagnostics>;

    fn end_episode(&mut self) -> Result<()>;
}

/// Weighted value-targeted regression with high-order moment estimation.
#[derive(Clone, Debug)]
pub struct UcrlWvtr {
    config: AgentConfig,
    horizon: usize,
    rewards: Vec<f64>,
    levels: Vec<LevelState>,
    episode: usize,
    bonus: f64,
    plan: Option<PlanResult>,
}

impl UcrlWvtr {
    /// `rewards` is the `[s][a]` table the agent plans with; returns under
    /// it must lie in `[0, 1]`.
    pub fn new(config: AgentConfig, features: FeatureMap, horizon: usize, rewards: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if rewards.len() != features.n_states() * features.n_actions() {
            return Err(Error::Config("reward table does not match feature map".into()));
        }
        let levels = (0..=config.levels)
            .map(|m| LevelState::new(m, &features, config.lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            horizon,
            rewards,
            levels,
            episode: 1,
            bonus: config.bonus_at(1, horizon),
            plan: None,
        })
    }

    /// Tabular linear-mixture agent for `mdp`, planning on normalized rewards.
    pub fn for_mdp(config: AgentConfig, mdp: &EpisodicMdp) -> Result<Self> {
        Self::new(
            config,
            FeatureMap::tabular(mdp.n_states(), mdp.n_actions()),
            mdp.horizon(),
            mdp.reward_table(RewardMode::Normalized),
        )
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn current_bonus(&self) -> f64 {
        self.bonus
    }

    pub fn levels(&self) -> &[LevelState] {
        &self.levels
    }

    pub fn current_plan(&self) -> Option<&PlanResult> {
        self.plan.as_ref()
    }

    /// Replaces the fitted model of `level`, e.g. to plant the true model.
    pub fn set_model_parameters(&mut self, level: usize, theta: DVector<f64>) -> Result<()> {
        let features = self.levels[level].model.features().clone();
        self.levels[level].model = LinearMixtureModel::with_parameters(features, theta)?;
        Ok(())
    }

    pub fn set_bonus(&mut self, bonus: f64) {
        self.bonus = bonus;
    }

    pub fn plan_episode(&self) -> Result<PlanResult> {
        plan(&self.levels[0], &self.config, self.bonus, self.horizon, &self.rewards)
    }

    /// HOME weights for `(state, action)` against the planned `V_{k,h+1}`.
    pub fn weights_for(&self, h: usize, state: usize, action: usize) -> Result<HomeOutput> {
        let plan = self
            .plan
            .as_ref()
            .ok_or_else(|| Error::Config("no plan for the current episode".into()))?;
        let next = ValueVector::clamped(plan.values.row(h + 1));
        home(&self.levels, &self.config, self.bonus, state, action, &next)
    }
}

impl Agent for UcrlWvtr {
    fn begin_episode(&mut self) -> Result<EpisodePlan> {
        let result = self.plan_episode()?;
        let out = EpisodePlan {
            policy: result.policy.clone(),
            values: Some(result.values.clone()),
        };
        self.plan = Some(result);
        Ok(out)
    }

    fn observe(&mut self, h: usize, step: &Step) -> Result<StepDiagnostics> {
        let out = self.weights_for(h, step.state, step.action)?;
        let plan = self.plan.as_ref().expect("plan checked in weights_for");
        let next_value = plan.values.get(h + 1, step.next_state).clamp(0.0, 1.0);
        let keep_history = matches!(self.config.backend, UncertaintyBackend::Oracle { .. });
        for (m, level) in self.levels.iter_mut().enumerate() {
            let target = next_value.powi(1 << m);
            level.record(&out.features[m], out.sigma_sq[m].sqrt(), target, keep_history)?;
        }
        let sigma_bar = out.sigma_sq[0].sqrt();
        Ok(StepDiagnostics {
            sigma_bar: Some(sigma_bar),
            potential: Some(potential_term(out.live_uncertainty[0], sigma_bar)),
        })
    }

    fn end_episode(&mut self) -> Result<()> {
        for level in &mut self.levels {
            level.refit()?;
        }
        self.episode += 1;
        self.bonus = self.config.bonus_at(self.episode, self.horizon);
        self.plan = None;
        Ok(())
    }
}

/// Acts uniformly at random and never learns.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn begin_episode(&mut self) -> Result<EpisodePlan> {
        Ok(EpisodePlan {
            policy: Policy::Uniform,
            values: None,
        })
    }

    fn observe(&mut self, _h: usize, _step: &Step) -> Result<StepDiagnostics> {
        Ok(StepDiagnostics::default())
    }

    fn end_episode(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Replays one fixed policy; useful as a reference learner.
#[derive(Clone, Debug)]
pub struct FixedPolicyAgent {
    pub policy: Policy,
}

impl Agent for FixedPolicyAgent {
    fn begin_episode(&mut self) -> Result<EpisodePlan> {
        Ok(EpisodePlan {
            policy: self.policy.clone(),
            values: None,
        })
    }

    fn observe(&mut self, _h: usize, _step: &Step) -> Result<StepDiagnostics> {
        Ok(StepDiagnostics::default())
    }

    fn end_episode(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[serde(alias = "ucrl_wvtr")]
    Wvtr,
    #[serde(alias = "ucrl_vtr")]
    Vtr,
    #[serde(alias = "wvtr_no_home")]
    NoHome,
    Random,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Wvtr => "wvtr",
            BaselineKind::Vtr => "vtr",
            BaselineKind::NoHome => "no_home",
            BaselineKind::Random => "random",
        }
    }

    /// Default hyperparameters; `None` for the non-learning baseline.
    pub fn default_config(&self) -> Option<AgentConfig> {
        match self {
            BaselineKind::Wvtr => Some(AgentConfig::wvtr()),
            BaselineKind::Vtr => Some(AgentConfig::vtr()),
            BaselineKind::NoHome => Some(AgentConfig::no_home()),
            BaselineKind::Random => None,
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wvtr" | "ucrl_wvtr" => Ok(BaselineKind::Wvtr),
            "vtr" | "ucrl_vtr" => Ok(BaselineKind::Vtr),
            "no_home" | "wvtr_no_home" => Ok(BaselineKind::NoHome),
            "random" => Ok(BaselineKind::Random),
            other => Err(Error::Config(format!("unknown agent `{other}`"))),
        }
    }
}

/// A baseline agent with its default hyperparameters.
pub fn make_baseline(kind: BaselineKind, mdp: &EpisodicMdp) -> Result<Box<dyn Agent>> {
    match kind.default_config() {
        Some(config) => Ok(Box::new(UcrlWvtr::for_mdp(config, mdp)?)),
        None => Ok(Box::new(RandomAgent)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_riverswim, optimal_values, sample_episode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_agent(config: AgentConfig, mdp: &EpisodicMdp) -> UcrlWvtr {
        let mut agent = UcrlWvtr::for_mdp(config, mdp).unwrap();
        let fm = FeatureMap::tabular(mdp.n_states(), mdp.n_actions());
        let truth = fm.tabular_truth(mdp).unwrap();
        for m in 0..=config.levels {
            agent.set_model_parameters(m, truth.clone()).unwrap();
        }
        agent
    }

    #[test]
    fn baseline_configs_match_table() {
        let w = AgentConfig::wvtr();
        assert_eq!((w.lambda, w.sigma_min, w.gamma, w.levels), (0.001, 0.01, 0.5, 3));
        let n = AgentConfig::no_home();
        assert_eq!((n.lambda, n.sigma_min, n.gamma, n.levels), (0.001, 0.01, 0.5, 1));
        let v = AgentConfig::vtr();
        assert_eq!((v.lambda, v.sigma_min, v.gamma, v.levels), (0.001, 1.0, 0.0, 0));
        for c in [w, n, v] {
            assert_eq!(c.bonus, BonusSchedule::Constant { beta: 1.0 });
            c.validate().unwrap();
        }
    }

    #[test]
    fn zero_gamma_requires_zero_levels() {
        let bad = AgentConfig {
            gamma: 0.0,
            ..AgentConfig::wvtr()
        };
        assert!(bad.validate().is_err());
        let bad = AgentConfig {
            sigma_min: 0.0,
            ..AgentConfig::wvtr()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn theoretical_levels_formula() {
        assert_eq!(AgentConfig::theoretical_levels(5000, 20), 19);
    }

    #[test]
    fn theoretical_bonus_grows_with_episode() {
        let config = AgentConfig {
            bonus: BonusSchedule::Theoretical {
                log_covering: 10.0,
                delta: 0.1,
                epsilon: 1e-6,
            },
            ..AgentConfig::wvtr()
        };
        config.validate().unwrap();
        let b1 = config.bonus_at(1, 20);
        let b10 = config.bonus_at(10, 20);
        assert!(b1 > 0.0 && b10 > b1);
    }

    #[test]
    fn planted_model_reproduces_optimal_q() {
        let mdp = make_riverswim(5, 20, RewardMode::Normalized).unwrap();
        let mut agent = exact_agent(AgentConfig::wvtr(), &mdp);
        agent.set_bonus(0.0);
        let result = agent.plan_episode().unwrap();
        let star = optimal_values(&mdp);
        assert!(result.values.max_abs_diff(&star) < 1e-10);
        for h in 0..20 {
            for s in 0..5 {
                for a in 0..2 {
                    let q_star = mdp.reward(s, a) + mdp.expect(s, a, star.row(h + 1));
                    assert!((result.q(h, s, a) - q_star).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_model_zero_reward_plans_zero() {
        let fm = FeatureMap::tabular(3, 2);
        let config = AgentConfig {
            bonus: BonusSchedule::Constant { beta: 0.0 },
            ..AgentConfig::wvtr()
        };
        let agent = UcrlWvtr::new(config, fm, 4, vec![0.0; 6]).unwrap();
        let result = agent.plan_episode().unwrap();
        assert_eq!(result.values.max_abs_diff(&ValueTable::zeros(4, 3)), 0.0);
    }

    #[test]
    fn huge_bonus_saturates_clip() {
        let mdp = make_riverswim(4, 6, RewardMode::Normalized).unwrap();
        let config = AgentConfig {
            bonus: BonusSchedule::Constant { beta: 1e6 },
            ..AgentConfig::wvtr()
        };
        let agent = UcrlWvtr::for_mdp(config, &mdp).unwrap();
        let result = agent.plan_episode().unwrap();
        for h in 0..5 {
            for s in 0..4 {
                for a in 0..2 {
                    assert_eq!(result.q(h, s, a), 1.0);
                }
            }
        }
    }

    #[test]
    fn cold_start_top_level_weight_is_one() {
        let mdp = make_riverswim(5, 10, RewardMode::Normalized).unwrap();
        let config = AgentConfig {
            gamma: 0.0,
            levels: 0,
            ..AgentConfig::wvtr()
        };
        let mut agent = UcrlWvtr::for_mdp(config, &mdp).unwrap();
        agent.begin_episode().unwrap();
        let out = agent.weights_for(0, 0, 0).unwrap();
        assert_eq!(out.sigma_sq, vec![1.0]);
    }

    #[test]
    fn zero_uncertainty_and_models_give_floor() {
        // β̂ = 0 removes E, γ = 0 removes the live term, zero models give zero variance.
        let fm = FeatureMap::tabular(3, 2);
        let config = AgentConfig {
            gamma: 0.5,
            bonus: BonusSchedule::Constant { beta: 0.0 },
            ..AgentConfig::wvtr()
        };
        let mut agent = UcrlWvtr::new(config, fm, 3, vec![0.0; 6]).unwrap();
        agent.begin_episode().unwrap();
        // Planned values are all zero, so every feature is zero and D = 0.
        let out = agent.weights_for(0, 1, 0).unwrap();
        for m in 0..3 {
            assert_eq!(out.sigma_sq[m], 0.01 * 0.01);
        }
        assert_eq!(out.sigma_sq[3], 1.0);
    }

    #[test]
    fn exact_models_recover_conditional_variance() {
        let mdp = make_riverswim(5, 20, RewardMode::Normalized).unwrap();
        let config = AgentConfig {
            bonus: BonusSchedule::Constant { beta: 0.0 },
            gamma: 0.5,
            ..AgentConfig::wvtr()
        };
        let agent = exact_agent(config, &mdp);
        let next = ValueVector::new(vec![0.1, 0.4, 0.2, 0.9, 0.7]).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                let out = home(agent.levels(), agent.config(), 0.0, s, a, &next).unwrap();
                let truth = mdp.conditional_variance(s, a, next.as_slice());
                assert!((out.variance_estimate[0] - truth).abs() < 1e-10);
                let live_term = 0.25 * out.live_uncertainty[0];
                let expected = truth.max(1e-4).max(live_term);
                assert!((out.sigma_sq[0] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vtr_weights_are_all_one() {
        let mdp = make_riverswim(5, 20, RewardMode::Normalized).unwrap();
        let mut agent = UcrlWvtr::for_mdp(AgentConfig::vtr(), &mdp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let plan = agent.begin_episode().unwrap();
            let traj = sample_episode(&mdp, &plan.policy, 0, &mut rng);
            for (h, step) in traj.steps.iter().enumerate() {
                let d = agent.observe(h, step).unwrap();
                assert_eq!(d.sigma_bar, Some(1.0));
            }
            agent.end_episode().unwrap();
        }
    }

    #[test]
    fn no_home_top_level_uses_unit_variance() {
        let mdp = make_riverswim(5, 10, RewardMode::Normalized).unwrap();
        let mut agent = UcrlWvtr::for_mdp(AgentConfig::no_home(), &mdp).unwrap();
        agent.begin_episode().unwrap();
        let out = agent.weights_for(3, 1, 0).unwrap();
        assert_eq!(out.sigma_sq.len(), 2);
        let expected = 1.0_f64.max(1e-4).max(0.25 * out.live_uncertainty[1]);
        assert_eq!(out.sigma_sq[1], expected);
    }

    #[test]
    fn sigma_floor_gives_maximal_weight() {
        let fm = FeatureMap::tabular(2, 1);
        let mut level = LevelState::new(0, &fm, 1.0).unwrap();
        let phi = fm.phi_v(0, 0, &ValueVector::new(vec![1.0, 0.0]).unwrap());
        level.record(&phi, 0.01, 1.0, false).unwrap();
        // Gram entry: λ + (1/σ)² · scale² = 1 + 1e4 · 0.5.
        assert!((level.live().gram_block(0)[(0, 0)] - (1.0 + 1e4 * 0.5)).abs() < 1e-9);
    }

    #[test]
    fn repeated_query_lowers_live_uncertainty() {
        let mdp = make_riverswim(5, 10, RewardMode::Normalized).unwrap();
        let mut agent = UcrlWvtr::for_mdp(AgentConfig::wvtr(), &mdp).unwrap();
        agent.begin_episode().unwrap();
        let step = Step {
            state: 0,
            action: 0,
            reward: 0.0,
            next_state: 1,
        };
        let before = agent.weights_for(0, 0, 0).unwrap().live_uncertainty[0];
        agent.observe(0, &step).unwrap();
        let after = agent.weights_for(0, 0, 0).unwrap().live_uncertainty[0];
        assert!(after < before);
    }

    #[test]
    fn end_episode_matches_batch_fit() {
        let mdp = make_riverswim(4, 8, RewardMode::Normalized).unwrap();
        let mut agent = UcrlWvtr::for_mdp(AgentConfig::wvtr(), &mdp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let plan = agent.begin_episode().unwrap();
        let traj = sample_episode(&mdp, &plan.policy, 0, &mut rng);
        let fm = FeatureMap::tabular(4, 2);
        let mut samples = Vec::new();
        for (h, step) in traj.steps.iter().enumerate() {
            let out = agent.weights_for(h, step.state, step.action).unwrap();
            let v = plan.values.as_ref().unwrap();
            samples.push(crate::model::WeightedSample {
                query: crate::model::Query {
                    state: step.state,
                    action: step.action,
                    values: ValueVector::clamped(v.row(h + 1)),
                },
                weight: 1.0 / out.sigma_sq[0].sqrt(),
                target: v.get(h + 1, step.next_state),
            });
            agent.observe(h, step).unwrap();
        }
        agent.end_episode().unwrap();
        let batch = crate::model::fit_samples(&fm, &samples, 0.001).unwrap();
        assert!((agent.levels()[0].model().parameters() - batch).norm() < 1e-9);
    }

    #[test]
    fn empty_episode_leaves_models_unchanged() {
        let mdp = make_riverswim(3, 4, RewardMode::Normalized).unwrap();
        let mut agent = UcrlWvtr::for_mdp(AgentConfig::wvtr(), &mdp).unwrap();
        let before = agent.levels()[0].model().parameters().clone();
        agent.end_episode().unwrap();
        assert_eq!(agent.levels()[0].model().parameters(), &before);
    }

    #[test]
    fn oracle_backend_runs_and_stays_clipped() {
        let mdp = make_riverswim(3, 4, RewardMode::Normalized).unwrap();
        let config = AgentConfig {
            backend: UncertaintyBackend::Oracle { precision: 1e-3 },
            ..AgentConfig::wvtr()
        };
        let mut agent = UcrlWvtr::for_mdp(config, &mdp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2 {
            let plan = agent.begin_episode().unwrap();
            let traj = sample_episode(&mdp, &plan.policy, 0, &mut rng);
            for (h, step) in traj.steps.iter().enumerate() {
                let d = agent.observe(h, step).unwrap();
                assert!(d.sigma_bar.unwrap() >= 0.01);
            }
            agent.end_episode().unwrap();
            let v = plan.values.unwrap();
            for h in 0..=4 {
                for s in 0..3 {
                    assert!((0.0..=1.0).contains(&v.get(h, s)));
                }
            }
        }
    }

    #[test]
    fn baseline_names_parse() {
        for kind in [
            BaselineKind::Wvtr,
            BaselineKind::Vtr,
            BaselineKind::NoHome,
            BaselineKind::Random,
        ] {
            assert_eq!(kind.name().parse::<BaselineKind>().unwrap(), kind);
        }
        assert_eq!("ucrl_vtr".parse::<BaselineKind>().unwrap(), BaselineKind::Vtr);
        assert!("foo".parse::<BaselineKind>().is_err());
    }
}

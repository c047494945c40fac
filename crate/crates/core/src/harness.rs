//! Multi-seed experiment runner with exact regret accounting and CSV output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    Agent, AgentConfig, BaselineKind, BonusSchedule, ErrorWidth, FixedPolicyAgent, RandomAgent, UcrlWvtr,
    UncertaintyBackend,
};
use crate::env::{
    greedy_policy, make_riverswim, optimal_values, policy_value, sample_episode, EpisodicMdp, RewardMode,
};
use crate::error::{Error, Result};
use crate::model::FeatureMap;

pub const CSV_HEADER: [&str; 7] = [
    "agent",
    "seed",
    "k",
    "cum_regret",
    "avg_reward",
    "realized_potential",
    "mean_sigma_bar",
];

/// Tolerance for `V_{k,1}(s₁) ≥ V*_1(s₁)`.
pub const OPTIMISM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[default]
    Riverswim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    #[serde(default)]
    pub env: EnvKind,
    pub n_states: usize,
    pub horizon: usize,
    #[serde(default)]
    pub reward_mode: RewardMode,
}

impl EnvironmentConfig {
    pub fn riverswim(n_states: usize, horizon: usize, reward_mode: RewardMode) -> Self {
        Self {
            env: EnvKind::Riverswim,
            n_states,
            horizon,
            reward_mode,
        }
    }

    pub fn build(&self) -> Result<EpisodicMdp> {
        match self.env {
            EnvKind::Riverswim => make_riverswim(self.n_states, self.horizon, self.reward_mode),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Theoretical,
}

/// One agent entry; unset keys fall back to the defaults of `agent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub agent: BaselineKind,
    /// Name used in the CSV; defaults to the agent kind.
    pub label: Option<String>,
    pub lambda: Option<f64>,
    pub sigma_min: Option<f64>,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    #[serde(rename = "M")]
    pub levels: Option<usize>,
    pub schedule: Option<ScheduleKind>,
    /// `log N_F(ε)`; defaults to `d·ln(B/ε)`.
    pub log_covering: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub error_width: Option<ErrorWidth>,
    /// Oracle precision; when set, uncertainties go through the oracle path.
    pub oracle_precision: Option<f64>,
}

impl AgentSpec {
    pub fn new(agent: BaselineKind) -> Self {
        Self {
            agent,
            label: None,
            lambda: None,
            sigma_min: None,
            gamma: None,
            beta: None,
            levels: None,
            schedule: None,
            log_covering: None,
            delta: None,
            epsilon: None,
            error_width: None,
            oracle_precision: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.agent.name().to_string())
    }

    /// Resolved hyperparameters; `None` for the random agent.
    pub fn resolve(&self, features: &FeatureMap) -> Result<Option<AgentConfig>> {
        let Some(mut config) = self.agent.default_config() else {
            return Ok(None);
        };
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.sigma_min {
            config.sigma_min = v;
        }
        if let Some(v) = self.gamma {
            config.gamma = v;
        }
        if let Some(v) = self.levels {
            config.levels = v;
        }
        if let Some(v) = self.error_width {
            config.error_width = v;
        }
        if let Some(precision) = self.oracle_precision {
            config.backend = UncertaintyBackend::Oracle { precision };
        }
        config.bonus = match self.schedule.unwrap_or_default() {
            ScheduleKind::Constant => BonusSchedule::Constant {
                beta: self.beta.unwrap_or(1.0),
            },
            ScheduleKind::Theoretical => {
                let epsilon = self.epsilon.unwrap_or(1e-3);
                let log_covering = self
                    .log_covering
                    .unwrap_or_else(|| features.dim() as f64 * (features.parameter_bound() / epsilon).ln().max(1.0));
                BonusSchedule::Theoretical {
                    log_covering,
                    delta: self.delta.unwrap_or(0.05),
                    epsilon,
                }
            }
        };
        config.validate()?;
        Ok(Some(config))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub agents: Vec<AgentSpec>,
    /// `K`.
    pub episodes: usize,
    /// Number of seeds; run `i` uses `base_seed + i`.
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub output: Option<PathBuf>,
    #[serde(default = "yes")]
    pub record_sigma: bool,
    #[serde(default = "yes")]
    pub record_potential: bool,
    /// Worker pool size; all cores when unset.
    pub threads: Option<usize>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Default agents (wvtr, vtr, no_home, random) on RiverSwim.
    pub fn riverswim_default(n_states: usize, horizon: usize, episodes: usize, seeds: usize) -> Self {
        Self {
            environment: EnvironmentConfig::riverswim(n_states, horizon, RewardMode::Raw),
            agents: [
                BaselineKind::Wvtr,
                BaselineKind::Vtr,
                BaselineKind::NoHome,
                BaselineKind::Random,
            ]
            .into_iter()
            .map(AgentSpec::new)
            .collect(),
            episodes,
            seeds,
            base_seed: 0,
            output: None,
            record_sigma: true,
            record_potential: true,
            threads: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("no agents configured".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        let mdp = self.environment.build()?;
        let features = FeatureMap::tabular(mdp.n_states(), mdp.n_actions());
        let mut labels = std::collections::BTreeSet::new();
        for spec in &self.agents {
            if !labels.insert(spec.label()) {
                return Err(Error::Config(format!("duplicate agent label `{}`", spec.label())));
            }
            spec.resolve(&features)?;
        }
        Ok(())
    }
}

/// Per-episode record of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub k: usize,
    pub cum_regret: f64,
    /// Sampled in-episode reward divided by `H`.
    pub avg_reward: f64,
    /// Cumulative `Σ min{1, D²/σ̄²}` at level 0.
    pub realized_potential: Option<f64>,
    /// Mean level-0 `σ̄` over the episode.
    pub mean_sigma_bar: Option<f64>,
    /// Planned `V_{k,1}(s₁)` in the agent's `[0, 1]` scale.
    pub planned_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretTrace {
    pub agent: String,
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    /// Normalized `V*_1(s₁)`, the optimism reference.
    pub normalized_optimum: f64,
}

impl RegretTrace {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn regret_at(&self, k: usize) -> Option<f64> {
        self.records.get(k.checked_sub(1)?).map(|r| r.cum_regret)
    }

    /// Episodes with `V_{k,1}(s₁) ≥ V*_1(s₁) − tol`, and episodes with a plan.
    pub fn optimism_counts(&self) -> (usize, usize) {
        let planned: Vec<f64> = self.records.iter().filter_map(|r| r.planned_value).collect();
        let hits = planned
            .iter()
            .filter(|&&v| v >= self.normalized_optimum - OPTIMISM_TOLERANCE)
            .count();
        (hits, planned.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub agent: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResult {
    /// Sorted by agent label, then seed.
    pub traces: Vec<RegretTrace>,
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentAggregate {
    pub agent: String,
    pub seeds: usize,
    pub episodes: usize,
    pub mean_final_regret: f64,
    pub std_final_regret: f64,
    pub stderr_final_regret: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl ExperimentResult {
    pub fn traces_for<'a>(&'a self, agent: &'a str) -> impl Iterator<Item = &'a RegretTrace> + 'a {
        self.traces.iter().filter(move |t| t.agent == agent)
    }

    /// Seed-mean cumulative regret after episode `k`.
    pub fn mean_regret_at(&self, agent: &str, k: usize) -> Option<f64> {
        let values: Vec<f64> = self.traces_for(agent).map(|t| t.regret_at(k)).collect::<Option<_>>()?;
        if values.is_empty() {
            return None;
        }
        Some(mean_std(&values).0)
    }

    pub fn aggregate(&self) -> Vec<AgentAggregate> {
        let mut groups: BTreeMap<&str, Vec<&RegretTrace>> = BTreeMap::new();
        for t in &self.traces {
            groups.entry(&t.agent).or_default().push(t);
        }
        groups
            .into_iter()
            .map(|(agent, traces)| {
                let finals: Vec<f64> = traces.iter().map(|t| t.final_regret()).collect();
                let (mean, std) = mean_std(&finals);
                AgentAggregate {
                    agent: agent.to_string(),
                    seeds: traces.len(),
                    episodes: traces.iter().map(|t| t.records.len()).max().unwrap_or(0),
                    mean_final_regret: mean,
                    std_final_regret: std,
                    stderr_final_regret: std / (finals.len() as f64).sqrt(),
                }
            })
            .collect()
    }
}

/// Options for a single (agent, seed) run.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub episodes: usize,
    pub seed: u64,
    pub record_sigma: bool,
    pub record_potential: bool,
}

/// Runs one agent for `K` episodes, charging the exact regret of each
/// episode's policy.
pub fn run_agent(agent: &mut dyn Agent, label: &str, mdp: &EpisodicMdp, opts: RunOptions) -> Result<RegretTrace> {
    let s1 = mdp.initial_state();
    let horizon = mdp.horizon() as f64;
    let optimum = optimal_values(mdp).get(0, s1);
    let normalized_optimum = optimal_values(&mdp.with_reward_mode(RewardMode::Normalized)).get(0, s1);
    let raw = mdp.with_reward_mode(RewardMode::Raw);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::with_capacity(opts.episodes);
    let (mut cum_regret, mut potential) = (0.0, 0.0);
    for k in 1..=opts.episodes {
        let plan = agent.begin_episode()?;
        let value = policy_value(mdp, &plan.policy).get(0, s1);
        let gap = optimum - value;
        debug_assert!(gap > -1e-9, "policy value above optimum by {}", -gap);
        cum_regret += gap.max(0.0);

        let trajectory = sample_episode(mdp, &plan.policy, k, &mut rng);
        let (mut sigma_sum, mut sigma_count, mut saw_potential) = (0.0, 0usize, false);
        for (h, step) in trajectory.steps.iter().enumerate() {
            let diag = agent.observe(h, step)?;
            if let Some(s) = diag.sigma_bar {
                sigma_sum += s;
                sigma_count += 1;
            }
            if let Some(p) = diag.potential {
                potential += p;
                saw_potential = true;
            }
        }
        agent.end_episode()?;

        let raw_reward: f64 = trajectory.steps.iter().map(|s| raw.reward(s.state, s.action)).sum();
        records.push(EpisodeRecord {
            k,
            cum_regret,
            avg_reward: raw_reward / horizon,
            realized_potential: (opts.record_potential && saw_potential).then_some(potential),
            mean_sigma_bar: (opts.record_sigma && sigma_count > 0).then(|| sigma_sum / sigma_count as f64),
            planned_value: plan.values.map(|v| v.get(0, s1)),
        });
    }
    Ok(RegretTrace {
        agent: label.to_string(),
        seed: opts.seed,
        records,
        normalized_optimum,
    })
}

/// Builds the agent described by `spec` for `mdp`.
pub fn build_agent(spec: &AgentSpec, mdp: &EpisodicMdp) -> Result<Box<dyn Agent>> {
    let features = FeatureMap::tabular(mdp.n_states(), mdp.n_actions());
    match spec.resolve(&features)? {
        Some(config) => Ok(Box::new(UcrlWvtr::for_mdp(config, mdp)?)),
        None => Ok(Box::new(RandomAgent)),
    }
}

/// Agent that always plays the optimal policy.
pub fn optimal_agent(mdp: &EpisodicMdp) -> FixedPolicyAgent {
    FixedPolicyAgent {
        policy: greedy_policy(mdp, &optimal_values(mdp)),
    }
}

/// Runs every (agent, seed) pair on a worker pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let mdp = config.environment.build()?;
    let tasks: Vec<(&AgentSpec, u64)> = config
        .agents
        .iter()
        .flat_map(|spec| config.seed_list().into_iter().map(move |seed| (spec, seed)))
        .collect();
    let run = |&(spec, seed): &(&AgentSpec, u64)| -> std::result::Result<RegretTrace, RunFailure> {
        let label = spec.label();
        let fail = |e: Error| RunFailure {
            agent: label.clone(),
            seed,
            message: e.to_string(),
        };
        let mut agent = build_agent(spec, &mdp).map_err(fail)?;
        let opts = RunOptions {
            episodes: config.episodes,
            seed,
            record_sigma: config.record_sigma,
            record_potential: config.record_potential,
        };
        run_agent(agent.as_mut(), &label, &mdp, opts).map_err(fail)
    };
    let outcomes: Vec<_> = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| tasks.par_iter().map(run).collect()),
        None => tasks.par_iter().map(run).collect(),
    };
    let mut result = ExperimentResult::default();
    for outcome in outcomes {
        match outcome {
            Ok(trace) => result.traces.push(trace),
            Err(failure) => result.failures.push(failure),
        }
    }
    result
        .traces
        .sort_by(|a, b| (&a.agent, a.seed).cmp(&(&b.agent, b.seed)));
    result
        .failures
        .sort_by(|a, b| (&a.agent, a.seed).cmp(&(&b.agent, b.seed)));
    Ok(result)
}

/// One CSV data row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub agent: String,
    pub seed: u64,
    pub k: usize,
    pub cum_regret: f64,
    pub avg_reward: f64,
    pub realized_potential: Option<f64>,
    pub mean_sigma_bar: Option<f64>,
}

pub fn csv_rows(result: &ExperimentResult) -> Vec<CsvRow> {
    let mut rows: Vec<CsvRow> = result
        .traces
        .iter()
        .flat_map(|t| {
            t.records.iter().map(|r| CsvRow {
                agent: t.agent.clone(),
                seed: t.seed,
                k: r.k,
                cum_regret: r.cum_regret,
                avg_reward: r.avg_reward,
                realized_potential: r.realized_potential,
                mean_sigma_bar: r.mean_sigma_bar,
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.agent, a.seed, a.k).cmp(&(&b.agent, b.seed, b.k)));
    rows
}

pub fn write_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for row in csv_rows(result) {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn emit_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    write_csv(result, fs::File::create(path)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Per-agent final-regret summary recomputed from CSV rows.
pub fn aggregate_rows(rows: &[CsvRow]) -> Vec<AgentAggregate> {
    let mut finals: BTreeMap<&str, BTreeMap<u64, (usize, f64)>> = BTreeMap::new();
    for row in rows {
        let entry = finals
            .entry(&row.agent)
            .or_default()
            .entry(row.seed)
            .or_insert((0, 0.0));
        if row.k >= entry.0 {
            *entry = (row.k, row.cum_regret);
        }
    }
    finals
        .into_iter()
        .map(|(agent, seeds)| {
            let values: Vec<f64> = seeds.values().map(|v| v.1).collect();
            let (mean, std) = mean_std(&values);
            AgentAggregate {
                agent: agent.to_string(),
                seeds: values.len(),
                episodes: seeds.values().map(|v| v.0).max().unwrap_or(0),
                mean_final_regret: mean,
                std_final_regret: std,
                stderr_final_regret: std / (values.len() as f64).sqrt(),
            }
        })
        .collect()
}

pub fn emit_summary(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for agg in result.aggregate() {
        writer.serialize(agg)?;
    }
    writer.flush()?;
    Ok(())
}

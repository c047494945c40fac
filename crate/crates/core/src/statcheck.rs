//! Synthetic checks of the weighted least-squares concentration bound and
//! the elliptical potential bound, independent of the RL loop.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::model::{oracle_fit, BlockFeature, BlockLayout, DatasetSummary};
use crate::uncertainty::elliptical_potential_bound;

/// One synthetic weighted regression stream with a linear truth.
///
/// Covariates are nonnegative with `‖x‖₁ ≤ 1` and `θ* ∈ [0, L]^d`, so
/// `f*(x) ∈ [0, L]`. Targets are `f*(x) ± a` with a fair sign and
/// `a = min(noise, f*, L − f*)`. Weights are drawn in
/// `[weight_floor, max_weight]` and capped at `σ/a` so that `w²·Var ≤ σ²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationTrial {
    pub dim: usize,
    pub steps: usize,
    /// `L`.
    pub range: f64,
    pub sigma: f64,
    pub noise: f64,
    pub weight_floor: f64,
    /// `W`; also sets `σ_min = 1/W`.
    pub max_weight: f64,
    pub delta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// `log N_F(ε)`; defaults to `d·ln(B/ε)` with `B = √d·L`.
    pub log_covering: Option<f64>,
}

impl Default for ConcentrationTrial {
    fn default() -> Self {
        Self {
            dim: 5,
            steps: 200,
            range: 1.0,
            sigma: 0.3,
            noise: 0.5,
            weight_floor: 0.2,
            max_weight: 1.0,
            delta: 0.1,
            lambda: 1e-3,
            epsilon: 1e-3,
            log_covering: None,
        }
    }
}

impl ConcentrationTrial {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && self.steps > 0
            && self.range > 0.0
            && self.sigma > 0.0
            && self.noise >= 0.0
            && self.weight_floor > 0.0
            && self.max_weight >= self.weight_floor
            && self.delta > 0.0
            && self.delta < 1.0
            && self.lambda >= 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid concentration trial {self:?}")))
        }
    }

    pub fn log_covering(&self) -> f64 {
        self.log_covering.unwrap_or_else(|| {
            let bound = (self.dim as f64).sqrt() * self.range;
            self.dim as f64 * (bound / self.epsilon).ln().max(0.0)
        })
    }

    pub fn sigma_min(&self) -> f64 {
        1.0 / self.max_weight
    }

    /// `ι_t = 16·log(2·N·t²·(log(σ²W²L²t)+2)·(log(W²L²)+2)/δ)`; inner logs
    /// are floored at 0.
    pub fn iota(&self) -> f64 {
        let t = self.steps as f64;
        let wl2 = (self.max_weight * self.range).powi(2);
        let inner1 = (self.sigma * self.sigma * wl2 * t).ln().max(0.0) + 2.0;
        let inner2 = wl2.ln().max(0.0) + 2.0;
        16.0 * (std::f64::consts::LN_2 + self.log_covering() + 2.0 * t.ln() + inner1.ln() + inner2.ln()
            - self.delta.ln())
    }

    /// `β_{t+1}` given `max_s w_s²·D_s`.
    pub fn beta(&self, max_weighted_uncertainty: f64) -> f64 {
        let iota = self.iota();
        let s2 = self.sigma_min().powi(2);
        3.0 * iota.sqrt() * self.sigma
            + 2.0 * iota * self.range * max_weighted_uncertainty
            + self.lambda.sqrt()
            + (6.0 * self.range * self.steps as f64 * self.epsilon / s2).sqrt()
    }
}

/// A sampled stream together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialStream {
    pub theta: DVector<f64>,
    pub inputs: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn sample_stream<R: Rng + ?Sized>(trial: &ConcentrationTrial, rng: &mut R) -> TrialStream {
    let d = trial.dim;
    let l = trial.range;
    let theta = DVector::from_fn(d, |_, _| rng.random_range(0.0..=l));
    let mut stream = TrialStream {
        theta,
        inputs: Vec::with_capacity(trial.steps),
        weights: Vec::with_capacity(trial.steps),
        targets: Vec::with_capacity(trial.steps),
    };
    for _ in 0..trial.steps {
        let raw = DVector::from_fn(d, |_, _| rng.random::<f64>());
        let scale = rng.random_range(0.2..=1.0) / raw.sum().max(f64::MIN_POSITIVE);
        let x = raw * scale;
        let f = stream.theta.dot(&x).clamp(0.0, l);
        let a = trial.noise.min(f).min(l - f).max(0.0);
        let w_raw = rng.random_range(trial.weight_floor..=trial.max_weight);
        let w = if a > 0.0 { w_raw.min(trial.sigma / a) } else { w_raw };
        let y = if rng.random::<bool>() { f + a } else { f - a };
        stream.inputs.push(x);
        stream.weights.push(w);
        stream.targets.push(y.clamp(0.0, l));
    }
    stream
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrialOutcome {
    /// `Σ w_s²(f̂(X_s) − f*(X_s))²`.
    pub lhs: f64,
    pub beta: f64,
    pub beta_sq: f64,
    /// `max_s w_s²·D_s`.
    pub max_weighted_uncertainty: f64,
    pub violated: bool,
}

/// Fits weighted ridge regression on `stream` and compares the in-sample
/// weighted error with `β²`.
pub fn evaluate_stream(trial: &ConcentrationTrial, stream: &TrialStream) -> Result<TrialOutcome> {
    let layout = BlockLayout::dense(trial.dim);
    let mut summary = DatasetSummary::new(layout, trial.lambda)?;
    let mut max_wd: f64 = 0.0;
    let features: Vec<BlockFeature> = stream
        .inputs
        .iter()
        .map(|x| BlockFeature {
            block: 0,
            values: x.clone(),
        })
        .collect();
    for ((phi, &w), &y) in features.iter().zip(&stream.weights).zip(&stream.targets) {
        if trial.lambda > 0.0 || !summary.is_empty() {
            if let Ok(d) = summary.inverse_norm(phi) {
                max_wd = max_wd.max(w * w * d);
            }
        }
        summary.add(phi, w, y)?;
    }
    let theta_hat = oracle_fit(&summary)?;
    let diff = &theta_hat - &stream.theta;
    let lhs = stream
        .inputs
        .iter()
        .zip(&stream.weights)
        .map(|(x, w)| w * w * diff.dot(x).powi(2))
        .sum::<f64>();
    let beta = trial.beta(max_wd);
    let beta_sq = beta * beta;
    Ok(TrialOutcome {
        lhs,
        beta,
        beta_sq,
        max_weighted_uncertainty: max_wd,
        violated: lhs > beta_sq,
    })
}

pub fn run_concentration_trial<R: Rng + ?Sized>(trial: &ConcentrationTrial, rng: &mut R) -> Result<TrialOutcome> {
    trial.validate()?;
    evaluate_stream(trial, &sample_stream(trial, rng))
}

/// 99% upper quantile of `Bin(n, δ)`.
pub fn binomial_upper_quantile(trials: usize, delta: f64, level: f64) -> Result<u64> {
    let dist = Binomial::new(delta, trials as u64).map_err(|e| Error::Config(e.to_string()))?;
    Ok(dist.inverse_cdf(level))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatteryReport {
    pub delta: f64,
    pub sigma: f64,
    pub trials: usize,
    pub violations: usize,
    pub rate: f64,
    pub upper_quantile: u64,
    pub max_lhs_over_beta_sq: f64,
    pub pass: bool,
}

/// Runs `n` independent trials seeded `base_seed + i` and checks the
/// violation count against the 99% upper quantile of `Bin(n, δ)`.
pub fn run_battery(trial: &ConcentrationTrial, trials: usize, base_seed: u64) -> Result<BatteryReport> {
    trial.validate()?;
    let outcomes = (0..trials as u64)
        .into_par_iter()
        .map(|i| run_concentration_trial(trial, &mut ChaCha8Rng::seed_from_u64(base_seed + i)))
        .collect::<Result<Vec<_>>>()?;
    let violations = outcomes.iter().filter(|o| o.violated).count();
    let upper_quantile = binomial_upper_quantile(trials, trial.delta, 0.99)?;
    Ok(BatteryReport {
        delta: trial.delta,
        sigma: trial.sigma,
        trials,
        violations,
        rate: violations as f64 / trials.max(1) as f64,
        upper_quantile,
        max_lhs_over_beta_sq: outcomes.iter().map(|o| o.lhs / o.beta_sq).fold(0.0, f64::max),
        pass: violations as u64 <= upper_quantile,
    })
}

pub fn write_battery_csv<W: Write>(reports: &[BatteryReport], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in reports {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EllipticalCheck {
    pub potential: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `Σ min{1, ‖x_t‖²_{Σ_{t-1}^{-1}}}` for `x_t = φ_t/σ̄_t` against
/// `2d·log(1 + T·L²/(dλ))`, where `L` bounds `‖x_t‖`.
pub fn elliptical_bound_check(
    stream: &[(DVector<f64>, f64)],
    lambda: f64,
    feature_bound: f64,
) -> Result<EllipticalCheck> {
    let dim = stream.first().map_or(0, |(phi, _)| phi.len());
    if lambda <= 0.0 {
        return Err(Error::NumericInput(format!("regularizer λ = {lambda}")));
    }
    let mut inverse = DMatrix::<f64>::identity(dim, dim) / lambda;
    let mut potential = 0.0;
    for (phi, sigma_bar) in stream {
        if phi.len() != dim || *sigma_bar <= 0.0 {
            return Err(Error::NumericInput("malformed potential stream".into()));
        }
        let x = phi / *sigma_bar;
        let ax = &inverse * &x;
        let q = x.dot(&ax);
        potential += q.min(1.0);
        inverse -= (&ax * ax.transpose()) / (1.0 + q);
    }
    let bound = elliptical_potential_bound(dim, stream.len(), lambda, feature_bound * feature_bound);
    Ok(EllipticalCheck {
        potential,
        bound,
        pass: potential <= bound,
    })
}

/// Random stream with `‖φ‖ ≤ 1` and `σ̄ ∈ [σ_min, 1]`.
pub fn random_potential_stream<R: Rng + ?Sized>(
    dim: usize,
    steps: usize,
    sigma_min: f64,
    rng: &mut R,
) -> Vec<(DVector<f64>, f64)> {
    (0..steps)
        .map(|_| {
            let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
            let radius = rng.random::<f64>();
            let phi = if v.norm() > 0.0 { v.normalize() * radius } else { v };
            (phi, rng.random_range(sigma_min..=1.0))
        })
        .collect()
}

//! The uncertainty functional
//!
//! ```text
//! D²(X_t; X_[t-1], σ_[t-1]) = sup_{f1,f2 ∈ F} (f1(X_t) − f2(X_t))²
//!                             / (Σ_s (f1(X_s) − f2(X_s))² / σ_s² + λ)
//! ```
//!
//! For linear mixture classes it is `‖φ‖_{Σ⁻¹}`. Since `Σ ⪰ λI` and
//! `‖φ‖ ≤ 1`, the linear value never exceeds `1/√λ`, which is the range cap
//! used for an empty history. For other classes [`uncertainty_general`]
//! reduces the supremum to a sequence of weighted regressions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{BlockFeature, DatasetSummary, FactoredSummary};

/// `‖φ‖_{Σ⁻¹}` against a factored snapshot.
pub fn uncertainty_linear(snapshot: &FactoredSummary, feature: &BlockFeature) -> f64 {
    snapshot.inverse_norm(feature)
}

/// `‖φ‖_{Σ⁻¹}` against a live summary that is still receiving samples.
pub fn uncertainty_live(summary: &DatasetSummary, feature: &BlockFeature) -> Result<f64> {
    summary.inverse_norm(feature)
}

/// A weighted least-squares oracle over a difference class `G = F − F`.
pub trait DifferenceOracle {
    type Point;
    type Function;

    /// `argmin_g Σ_i weights[i] (g(points[i]) − targets[i])²`.
    fn regress(&mut self, points: &[&Self::Point], weights: &[f64], targets: &[f64]) -> Result<Self::Function>;

    fn evaluate(&self, function: &Self::Function, point: &Self::Point) -> f64;
}

/// Inputs to the oracle-based uncertainty computation.
#[derive(Clone, Debug)]
pub struct UncertaintyProblem<'a, P> {
    pub history: &'a [P],
    pub sigmas: &'a [f64],
    pub lambda: f64,
    /// Upper bound `B ≥ Σ_s g*(X_s)²/σ_s² + λ` for the maximizer `g*`.
    pub upper_bound: f64,
    pub precision: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralUncertainty {
    pub value: f64,
    pub oracle_calls: usize,
}

/// Default `B` for classes with values in `[0, 1]`: `KH/σ_min² + λ`.
pub fn default_upper_bound(n_samples: usize, sigma_min: f64, lambda: f64) -> f64 {
    n_samples as f64 / (sigma_min * sigma_min) + lambda
}

/// Estimates the uncertainty of `query` with a doubling search over the
/// constraint level and a binary search over the weight on the query point.
///
/// The result `D̃` satisfies `D̃ − ε/√λ ≤ D ≤ √2·D̃ + ε/√λ` whenever the
/// class is convex and the oracle is exact.
pub fn uncertainty_general<O: DifferenceOracle>(
    problem: &UncertaintyProblem<'_, O::Point>,
    query: &O::Point,
    oracle: &mut O,
) -> Result<GeneralUncertainty> {
    let UncertaintyProblem {
        history,
        sigmas,
        lambda,
        upper_bound,
        precision: eps,
    } = *problem;
    if history.len() != sigmas.len() {
        return Err(Error::Config("history and sigma lengths differ".into()));
    }
    if !(lambda > 0.0 && eps > 0.0 && upper_bound.is_finite()) {
        return Err(Error::NumericInput(format!(
            "need λ > 0, ε > 0 and finite B (λ={lambda}, ε={eps}, B={upper_bound})"
        )));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::NumericInput("sigmas must be positive".into()));
    }

    let history_weights: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let points: Vec<&O::Point> = history.iter().chain(std::iter::once(query)).collect();
    let mut targets = vec![0.0; history.len()];
    targets.push(1.0);

    let mut calls = 0;
    let mut regress = |oracle: &mut O, v: f64| -> Result<O::Function> {
        calls += 1;
        let mut weights = history_weights.clone();
        weights.push(v);
        oracle.regress(&points, &weights, &targets)
    };
    let constraint = |oracle: &O, g: &O::Function| -> f64 {
        history
            .iter()
            .zip(&history_weights)
            .map(|(x, w)| w * oracle.evaluate(g, x).powi(2))
            .sum()
    };

    let mut estimate = 0.0_f64;
    let mut beta_bar = 2.0 * lambda;
    // At least one round, even when `B = λ`.
    loop {
        let beta = beta_bar - lambda;
        let (mut v_lo, mut v_hi) = (0.0, 2.0 * beta / eps);
        let g_hi = regress(oracle, v_hi)?;
        let (mut z_lo, mut z_hi) = (0.0, oracle.evaluate(&g_hi, query));
        let gap = eps * beta / 4.0;
        let mut candidate = g_hi;
        while (z_hi - z_lo).abs() > eps && (v_hi - v_lo).abs() > gap {
            let v_mid = 0.5 * (v_hi + v_lo);
            let g = regress(oracle, v_mid)?;
            let z = oracle.evaluate(&g, query);
            if constraint(oracle, &g) > beta {
                v_hi = v_mid;
                z_hi = z;
            } else {
                v_lo = v_mid;
                z_lo = z;
            }
            candidate = g;
        }
        let ratio = oracle.evaluate(&candidate, query) / (constraint(oracle, &candidate) + lambda).sqrt();
        estimate = estimate.max(ratio);
        beta_bar *= 2.0;
        if beta_bar >= 2.0 * upper_bound {
            break;
        }
    }
    Ok(GeneralUncertainty {
        value: estimate,
        oracle_calls: calls,
    })
}

/// Exact oracle for the linear difference class `{⟨θ,·⟩ : ‖θ‖₂ ≤ R}`.
///
/// With `R = 1` its uncertainty coincides with `‖φ‖_{(Σ_s φφᵀ/σ² + λI)⁻¹}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BallLinearOracle {
    pub radius: f64,
}

impl Default for BallLinearOracle {
    fn default() -> Self {
        Self { radius: 1.0 }
    }
}

/// `B = R² Σ_s ‖x_s‖²/σ_s² + λ`, valid for the ball class.
pub fn ball_upper_bound(history: &[DVector<f64>], sigmas: &[f64], radius: f64, lambda: f64) -> f64 {
    radius
        * radius
        * history
            .iter()
            .zip(sigmas)
            .map(|(x, s)| x.norm_squared() / (s * s))
            .sum::<f64>()
        + lambda
}

impl DifferenceOracle for BallLinearOracle {
    type Point = DVector<f64>;
    type Function = DVector<f64>;

    fn regress(&mut self, points: &[&DVector<f64>], weights: &[f64], targets: &[f64]) -> Result<DVector<f64>> {
        let d = points.first().map_or(0, |p| p.len());
        let mut normal = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        for ((x, w), y) in points.iter().zip(weights).zip(targets) {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::NumericInput(format!("oracle weight {w}")));
            }
            normal.ger(*w, x, x, 1.0);
            rhs.axpy(w * y, x, 1.0);
        }
        Ok(trust_region_solve(normal, &rhs, self.radius))
    }

    fn evaluate(&self, function: &DVector<f64>, point: &DVector<f64>) -> f64 {
        function.dot(point)
    }
}

/// `argmin θᵀAθ − 2bᵀθ` subject to `‖θ‖ ≤ radius`, for symmetric PSD `A`
/// with `b` in the range of `A`.
fn trust_region_solve(normal: DMatrix<f64>, rhs: &DVector<f64>, radius: f64) -> DVector<f64> {
    let d = rhs.len();
    if d == 0 {
        return DVector::zeros(0);
    }
    let eig = SymmetricEigen::new(normal);
    let coeffs = eig.eigenvectors.transpose() * rhs;
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    // `b` lies in the range of `A`, so null-space coefficients are rounding noise.
    let floor = top * 1e-13;

    let norm_at = |mu: f64| -> f64 {
        eig.eigenvalues
            .iter()
            .zip(coeffs.iter())
            .filter(|(l, _)| **l > floor)
            .map(|(l, c)| (c / (l + mu)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let solution_at = |mu: f64| -> DVector<f64> {
        let scaled = DVector::from_iterator(
            d,
            eig.eigenvalues
                .iter()
                .zip(coeffs.iter())
                .map(|(l, c)| if *l > floor { c / (l + mu) } else { 0.0 }),
        );
        &eig.eigenvectors * scaled
    };

    if norm_at(0.0) <= radius {
        return solution_at(0.0);
    }
    // ‖θ(μ)‖ decreases in μ and ‖θ(μ)‖ ≤ ‖b‖/μ.
    let (mut lo, mut hi) = (0.0, coeffs.norm() / radius);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= hi * 1e-15 {
            break;
        }
    }
    solution_at(hi)
}

/// `Σ_t min{1, D_t²/σ̄_t²}` along one realized sequence.
pub fn realized_potential<I>(trace: I) -> f64
where
    I: IntoIterator<Item = (f64, f64)>,
{
    trace.into_iter().map(|(d, sigma)| potential_term(d, sigma)).sum()
}

pub fn potential_term(uncertainty: f64, sigma_bar: f64) -> f64 {
    (uncertainty * uncertainty / (sigma_bar * sigma_bar)).min(1.0)
}

/// `2d·log(1 + T·L²/(dλ))`.
pub fn elliptical_potential_bound(dim: usize, steps: usize, lambda: f64, feature_norm_sq: f64) -> f64 {
    if steps == 0 || dim == 0 {
        return 0.0;
    }
    let d = dim as f64;
    2.0 * d * (1.0 + steps as f64 * feature_norm_sq / (d * lambda)).ln()
}

/// The bound for weighted features `φ/σ̄` with `‖φ‖ ≤ 1` and `σ̄ ≥ σ_min`:
/// `2d·log(1 + T/(dλσ_min²))`.
pub fn weighted_potential_bound(dim: usize, steps: usize, lambda: f64, sigma_min: f64) -> f64 {
    elliptical_potential_bound(dim, steps, lambda, 1.0 / (sigma_min * sigma_min))
}

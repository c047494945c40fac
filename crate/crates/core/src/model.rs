//! Linear-mixture model class, weighted dataset summaries and regression
//! oracles.
//!
//! Features are block-sparse: every `φ_V(s,a)` lives in exactly one block of
//! a [`BlockLayout`]. A dense feature map is the single-block case; tabular
//! indicator features put each `(s,a)` pair in its own block, which makes the
//! weighted Gram matrix block-diagonal and keeps every solve at `|S| x |S|`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::env::EpisodicMdp;
use crate::error::{Error, Result};

/// A value function `V: S -> [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueVector(Vec<f64>);

impl ValueVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::NumericInput(format!(
                "value entries must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Self(values))
    }

    /// Clamps every entry into `[0, 1]`; NaN maps to 0.
    pub fn clamped(values: &[f64]) -> Self {
        Self(
            values
                .iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        )
    }

    pub fn zeros(n_states: usize) -> Self {
        Self(vec![0.0; n_states])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `V^{2^level}`, by repeated squaring.
    pub fn moment(&self, level: usize) -> Self {
        let mut out = self.0.clone();
        for _ in 0..level {
            for v in &mut out {
                *v *= *v;
            }
        }
        Self(out)
    }
}

/// Query point `z = (s, a, V)` of the value-targeted regression.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub state: usize,
    pub action: usize,
    pub values: ValueVector,
}

/// A regression example with weight `w = 1/σ̄` (the objective uses `w²`).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    pub query: Query,
    pub weight: f64,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub n_blocks: usize,
    pub block_dim: usize,
}

impl BlockLayout {
    pub fn dense(dim: usize) -> Self {
        Self {
            n_blocks: 1,
            block_dim: dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }
}

/// A feature vector supported on one block of a [`BlockLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockFeature {
    pub block: usize,
    pub values: DVector<f64>,
}

impl BlockFeature {
    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn to_dense(&self, layout: BlockLayout) -> DVector<f64> {
        let mut out = DVector::zeros(layout.dim());
        out.rows_mut(self.block * layout.block_dim, layout.block_dim)
            .copy_from(&self.values);
        out
    }

    pub fn dot(&self, layout: BlockLayout, theta: &DVector<f64>) -> f64 {
        theta
            .rows(self.block * layout.block_dim, layout.block_dim)
            .dot(&self.values)
    }
}

/// The known feature map `φ(s'|s,a)` of a linear mixture MDP.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    /// Indicator features `φ(s'|s,a) = scale · e_{(s,a,s')}` with
    /// `scale = 1/√|S|`, so `‖φ_V(s,a)‖₂ ≤ 1` for any `V` in `[0,1]`.
    Tabular { n_states: usize, n_actions: usize },
    /// Arbitrary `d`-dimensional features, stored at `(s * |A| + a) * |S| + s'`.
    Dense {
        n_states: usize,
        n_actions: usize,
        dim: usize,
        table: Vec<DVector<f64>>,
    },
}

impl FeatureMap {
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        FeatureMap::Tabular { n_states, n_actions }
    }

    pub fn dense(n_states: usize, n_actions: usize, table: Vec<DVector<f64>>) -> Result<Self> {
        let dim = table.first().map_or(0, |v| v.len());
        if dim == 0 || table.len() != n_states * n_actions * n_states {
            return Err(Error::Config(format!(
                "dense feature table needs {} non-empty vectors",
                n_states * n_actions * n_states
            )));
        }
        if table.iter().any(|v| v.len() != dim) {
            return Err(Error::Config("dense features of unequal length".into()));
        }
        Ok(FeatureMap::Dense {
            n_states,
            n_actions,
            dim,
            table,
        })
    }

    pub fn n_states(&self) -> usize {
        match self {
            FeatureMap::Tabular { n_states, .. } | FeatureMap::Dense { n_states, .. } => *n_states,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            FeatureMap::Tabular { n_actions, .. } | FeatureMap::Dense { n_actions, .. } => *n_actions,
        }
    }

    pub fn layout(&self) -> BlockLayout {
        match self {
            FeatureMap::Tabular { n_states, n_actions } => BlockLayout {
                n_blocks: n_states * n_actions,
                block_dim: *n_states,
            },
            FeatureMap::Dense { dim, .. } => BlockLayout::dense(*dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    fn tabular_scale(n_states: usize) -> f64 {
        1.0 / (n_states as f64).sqrt()
    }

    /// `φ_V(s,a) = Σ_{s'} φ(s'|s,a) V(s')`.
    pub fn phi_v(&self, state: usize, action: usize, values: &ValueVector) -> BlockFeature {
        match self {
            FeatureMap::Tabular { n_states, n_actions } => {
                let scale = Self::tabular_scale(*n_states);
                BlockFeature {
                    block: state * n_actions + action,
                    values: DVector::from_iterator(*n_states, values.as_slice().iter().map(|v| v * scale)),
                }
            }
            FeatureMap::Dense {
                n_states,
                n_actions,
                dim,
                table,
            } => {
                let base = (state * n_actions + action) * n_states;
                let mut out = DVector::zeros(*dim);
                for (next, v) in values.as_slice().iter().enumerate() {
                    if *v != 0.0 {
                        out.axpy(*v, &table[base + next], 1.0);
                    }
                }
                BlockFeature { block: 0, values: out }
            }
        }
    }

    pub fn phi_query(&self, query: &Query) -> BlockFeature {
        self.phi_v(query.state, query.action, &query.values)
    }

    /// The parameter `θ*` that reproduces `mdp`'s transitions under the
    /// tabular feature map.
    pub fn tabular_truth(&self, mdp: &EpisodicMdp) -> Result<DVector<f64>> {
        let FeatureMap::Tabular { n_states, n_actions } = self else {
            return Err(Error::Config("tabular_truth needs tabular features".into()));
        };
        if mdp.n_states() != *n_states || mdp.n_actions() != *n_actions {
            return Err(Error::Config("feature map and MDP shapes differ".into()));
        }
        let scale = Self::tabular_scale(*n_states);
        let mut theta = DVector::zeros(self.dim());
        for s in 0..*n_states {
            for a in 0..*n_actions {
                let base = (s * n_actions + a) * n_states;
                for (next, p) in mdp.transition_row(s, a).iter().enumerate() {
                    theta[base + next] = p / scale;
                }
            }
        }
        Ok(theta)
    }

    /// `‖θ*‖₂` bound `B` for tabular parameters: each block is a
    /// probability row divided by the feature scale.
    pub fn parameter_bound(&self) -> f64 {
        match self {
            FeatureMap::Tabular { n_states, n_actions } => {
                ((n_states * n_actions) as f64).sqrt() / Self::tabular_scale(*n_states)
            }
            FeatureMap::Dense { dim, .. } => (*dim as f64).sqrt(),
        }
    }
}

/// Weighted Gram matrix `Σ = Σ_i w_i² φ_i φ_iᵀ + λI` and moment vector
/// `b = Σ_i w_i² φ_i y_i`, stored block-diagonally.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    layout: BlockLayout,
    lambda: f64,
    grams: Vec<DMatrix<f64>>,
    moments: Vec<DVector<f64>>,
    count: usize,
}

impl DatasetSummary {
    pub fn new(layout: BlockLayout, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::NumericInput(format!("regularizer λ = {lambda}")));
        }
        let bd = layout.block_dim;
        Ok(Self {
            layout,
            lambda,
            grams: vec![DMatrix::identity(bd, bd) * lambda; layout.n_blocks],
            moments: vec![DVector::zeros(bd); layout.n_blocks],
            count: 0,
        })
    }

    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Rank-one update with weight `w` (the Gram gains `w² φ φᵀ`).
    pub fn add(&mut self, feature: &BlockFeature, weight: f64, target: f64) -> Result<()> {
        if !weight.is_finite() || weight <= 0.0 {
            return Err(Error::NumericInput(format!("sample weight {weight}")));
        }
        if !target.is_finite() || feature.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("non-finite feature or target".into()));
        }
        let w2 = weight * weight;
        let phi = &feature.values;
        self.grams[feature.block].ger(w2, phi, phi, 1.0);
        self.moments[feature.block].axpy(w2 * target, phi, 1.0);
        self.count += 1;
        Ok(())
    }

    pub fn gram_block(&self, block: usize) -> &DMatrix<f64> {
        &self.grams[block]
    }

    /// The full `d x d` Gram matrix.
    pub fn gram_dense(&self) -> DMatrix<f64> {
        let d = self.layout.dim();
        let bd = self.layout.block_dim;
        let mut out = DMatrix::zeros(d, d);
        for (b, g) in self.grams.iter().enumerate() {
            out.view_mut((b * bd, b * bd), (bd, bd)).copy_from(g);
        }
        out
    }

    pub fn moment_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.dim());
        for (b, m) in self.moments.iter().enumerate() {
            out.rows_mut(b * self.layout.block_dim, self.layout.block_dim)
                .copy_from(m);
        }
        out
    }

    fn factor_block(&self, block: usize) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.grams[block].clone())
            .ok_or_else(|| Error::Solve(format!("Gram block {block} is not positive definite")))
    }

    /// Cholesky factors of every block.
    pub fn factor(&self) -> Result<FactoredSummary> {
        let factors = (0..self.layout.n_blocks)
            .map(|b| self.factor_block(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(FactoredSummary {
            layout: self.layout,
            factors,
        })
    }

    /// `‖φ‖_{Σ⁻¹}` against the current data, factoring only the touched block.
    pub fn inverse_norm(&self, feature: &BlockFeature) -> Result<f64> {
        let chol = self.factor_block(feature.block)?;
        Ok(lower_solve_norm(&chol, &feature.values))
    }
}

fn lower_solve_norm(chol: &Cholesky<f64, Dyn>, phi: &DVector<f64>) -> f64 {
    // Σ = L Lᵀ, so φᵀ Σ⁻¹ φ = ‖L⁻¹ φ‖².
    match chol.l_dirty().solve_lower_triangular(phi) {
        Some(y) => y.norm(),
        None => f64::INFINITY,
    }
}

/// Cholesky-factored snapshot of a [`DatasetSummary`].
#[derive(Clone, Debug)]
pub struct FactoredSummary {
    layout: BlockLayout,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl FactoredSummary {
    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn inverse_norm(&self, feature: &BlockFeature) -> f64 {
        lower_solve_norm(&self.factors[feature.block], &feature.values)
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let bd = self.layout.block_dim;
        let mut out = DVector::zeros(self.layout.dim());
        for (b, chol) in self.factors.iter().enumerate() {
            let x = chol.solve(&rhs.rows(b * bd, bd).into_owned());
            out.rows_mut(b * bd, bd).copy_from(&x);
        }
        out
    }
}

/// Closed-form weighted ridge solution `θ̂ = Σ⁻¹ b`.
pub fn oracle_fit(summary: &DatasetSummary) -> Result<DVector<f64>> {
    let factored = summary.factor()?;
    let theta = factored.solve(&summary.moment_dense());
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solve("non-finite parameter estimate".into()));
    }
    Ok(theta)
}

/// Builds a summary from raw samples and solves it.
pub fn fit_samples(features: &FeatureMap, samples: &[WeightedSample], lambda: f64) -> Result<DVector<f64>> {
    let mut summary = DatasetSummary::new(features.layout(), lambda)?;
    for sample in samples {
        summary.add(&features.phi_query(&sample.query), sample.weight, sample.target)?;
    }
    oracle_fit(&summary)
}

/// A fitted member `f(s,a,V) = ⟨θ, φ_V(s,a)⟩` of the linear mixture class.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMixtureModel {
    features: FeatureMap,
    theta: DVector<f64>,
}

impl LinearMixtureModel {
    /// The all-zero model used before any data arrives.
    pub fn zero(features: FeatureMap) -> Self {
        let dim = features.dim();
        Self {
            features,
            theta: DVector::zeros(dim),
        }
    }

    pub fn with_parameters(features: FeatureMap, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::Config(format!(
                "parameter has length {}, feature map has dimension {}",
                theta.len(),
                features.dim()
            )));
        }
        Ok(Self { features, theta })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn parameters(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn set_parameters(&mut self, theta: DVector<f64>) {
        debug_assert_eq!(theta.len(), self.theta.len());
        self.theta = theta;
    }

    /// Unclamped `⟨θ, φ⟩`.
    pub fn raw_prediction(&self, feature: &BlockFeature) -> f64 {
        feature.dot(self.features.layout(), &self.theta)
    }

    /// Prediction clamped into `[0, 1]`.
    pub fn predict_feature(&self, feature: &BlockFeature) -> f64 {
        self.raw_prediction(feature).clamp(0.0, 1.0)
    }

    pub fn predict(&self, query: &Query) -> f64 {
        self.predict_feature(&self.features.phi_query(query))
    }
}

/// A parameterized function class the general oracle can optimize over.
pub trait ParametricClass {
    type Input;

    fn n_params(&self) -> usize;

    fn predict(&self, params: &DVector<f64>, input: &Self::Input) -> f64;

    /// Gradient of [`predict`](Self::predict) with respect to `params`.
    fn gradient(&self, params: &DVector<f64>, input: &Self::Input) -> DVector<f64>;

    fn initial_params(&self) -> DVector<f64> {
        DVector::zeros(self.n_params())
    }

    /// Radius of the Euclidean parameter ball, if the class is bounded.
    fn param_radius(&self) -> Option<f64> {
        None
    }
}

/// `g(x) = ⟨θ, x⟩` on dense inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClass {
    pub dim: usize,
    pub radius: Option<f64>,
}

impl ParametricClass for LinearClass {
    type Input = DVector<f64>;

    fn n_params(&self) -> usize {
        self.dim
    }

    fn predict(&self, params: &DVector<f64>, input: &DVector<f64>) -> f64 {
        params.dot(input)
    }

    fn gradient(&self, _params: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        input.clone()
    }

    fn param_radius(&self) -> Option<f64> {
        self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSample<X> {
    pub input: X,
    pub weight: f64,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Solver {
    /// Damped Gauss-Newton (Levenberg-Marquardt) steps.
    GaussNewton,
    /// Plain gradient descent with step `initial_step / √iteration`.
    GradientDescent { initial_step: f64 },
}

/// Iterative weighted least-squares oracle for general parametric classes.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralOracle {
    pub solver: Solver,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for GeneralOracle {
    fn default() -> Self {
        Self {
            solver: Solver::GaussNewton,
            max_iters: 500,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralFit {
    pub params: DVector<f64>,
    pub iterations: usize,
    /// `false` when the budget ran out before the gradient tolerance was met.
    pub converged: bool,
    pub gradient_norm: f64,
    pub objective: f64,
    /// Objective after every accepted iterate, starting at the initial point.
    pub objective_trace: Vec<f64>,
}

impl GeneralOracle {
    pub fn gradient_descent(initial_step: f64, max_iters: usize) -> Self {
        Self {
            solver: Solver::GradientDescent { initial_step },
            max_iters,
            grad_tol: 1e-8,
        }
    }

    /// Minimizes `Σ w²(f(x)−y)² + λ‖θ‖²` over the class.
    pub fn fit<C: ParametricClass>(
        &self,
        class: &C,
        samples: &[RegressionSample<C::Input>],
        lambda: f64,
    ) -> Result<GeneralFit> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::NumericInput(format!("regularizer λ = {lambda}")));
        }
        if samples
            .iter()
            .any(|s| !s.weight.is_finite() || s.weight <= 0.0 || !s.target.is_finite())
        {
            return Err(Error::NumericInput("weights must be positive and finite".into()));
        }

        let mut params = project(class.initial_params(), class.param_radius());
        let mut objective = weighted_objective(class, samples, lambda, &params);
        let mut trace = vec![objective];
        let mut grad = objective_gradient(class, samples, lambda, &params);
        let mut damping = 0.0_f64;
        let mut iterations = 0;

        while iterations < self.max_iters && grad.norm() >= self.grad_tol {
            iterations += 1;
            match self.solver {
                Solver::GradientDescent { initial_step } => {
                    let step = initial_step / (iterations as f64).sqrt();
                    params = project(&params - &grad * step, class.param_radius());
                    objective = weighted_objective(class, samples, lambda, &params);
                    trace.push(objective);
                }
                Solver::GaussNewton => {
                    let (normal, half_grad) = gauss_newton_system(class, samples, lambda, &params);
                    let mut accepted = false;
                    for _ in 0..60 {
                        let damped = &normal + DMatrix::identity(params.len(), params.len()) * damping;
                        let Some(chol) = Cholesky::new(damped) else {
                            damping = (damping * 10.0).max(1e-12);
                            continue;
                        };
                        let candidate = project(&params - chol.solve(&half_grad), class.param_radius());
                        let value = weighted_objective(class, samples, lambda, &candidate);
                        if value <= objective {
                            params = candidate;
                            objective = value;
                            damping /= 10.0;
                            accepted = true;
                            break;
                        }
                        damping = (damping * 10.0).max(1e-12);
                    }
                    if !accepted {
                        break;
                    }
                    trace.push(objective);
                }
            }
            grad = objective_gradient(class, samples, lambda, &params);
        }

        let gradient_norm = grad.norm();
        Ok(GeneralFit {
            params,
            iterations,
            converged: gradient_norm < self.grad_tol,
            gradient_norm,
            objective,
            objective_trace: trace,
        })
    }
}

fn project(params: DVector<f64>, radius: Option<f64>) -> DVector<f64> {
    match radius {
        Some(r) => {
            let norm = params.norm();
            if norm > r {
                params * (r / norm)
            } else {
                params
            }
        }
        None => params,
    }
}

fn weighted_objective<C: ParametricClass>(
    class: &C,
    samples: &[RegressionSample<C::Input>],
    lambda: f64,
    params: &DVector<f64>,
) -> f64 {
    let fit: f64 = samples
        .iter()
        .map(|s| {
            let r = class.predict(params, &s.input) - s.target;
            s.weight * s.weight * r * r
        })
        .sum();
    fit + lambda * params.norm_squared()
}

fn objective_gradient<C: ParametricClass>(
    class: &C,
    samples: &[RegressionSample<C::Input>],
    lambda: f64,
    params: &DVector<f64>,
) -> DVector<f64> {
    let mut grad = params * (2.0 * lambda);
    for s in samples {
        let r = class.predict(params, &s.input) - s.target;
        grad.axpy(2.0 * s.weight * s.weight * r, &class.gradient(params, &s.input), 1.0);
    }
    grad
}

/// Normal matrix `Σ w² ∇f∇fᵀ + λI` and half-gradient of the objective.
fn gauss_newton_system<C: ParametricClass>(
    class: &C,
    samples: &[RegressionSample<C::Input>],
    lambda: f64,
    params: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = params.len();
    let mut normal = DMatrix::identity(n, n) * lambda;
    let mut half_grad = params * lambda;
    for s in samples {
        let g = class.gradient(params, &s.input);
        let w2 = s.weight * s.weight;
        let r = class.predict(params, &s.input) - s.target;
        normal.ger(w2, &g, &g, 1.0);
        half_grad.axpy(w2 * r, &g, 1.0);
    }
    (normal, half_grad)
}

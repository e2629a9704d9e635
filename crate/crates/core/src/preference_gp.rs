//! Gaussian-process model of latent utilities learned from pairwise
//! preferences and ordinal labels.
//!
//! The posterior over utilities of a finite candidate set is approximated by
//! a Gaussian at its mode (Laplace approximation). Both likelihoods use the
//! logistic link, so the negative log posterior is convex and a damped Newton
//! iteration finds the mode reliably.

use std::collections::{HashMap, HashSet};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{Action, ActionGrid, ActionId};

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("invalid kernel configuration: {0}")]
    InvalidKernel(String),
    #[error("invalid likelihood configuration: {0}")]
    InvalidLikelihood(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("duplicate candidate {0}")]
    DuplicateAction(ActionId),
    #[error("feedback references action {0} which is not a candidate")]
    UnknownAction(ActionId),
    #[error("ordinal label {label} outside 1..={categories}")]
    LabelOutOfRange { label: usize, categories: usize },
    #[error("preference compares action {0} with itself")]
    SelfPreference(ActionId),
    #[error("prior covariance is not positive definite")]
    SingularPrior,
    #[error("Hessian lost positive definiteness at Newton iteration {0}")]
    IndefiniteHessian(usize),
    #[error("Newton did not converge after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("posterior covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("empty candidate set")]
    Empty,
}

/// Squared-exponential kernel over bound-normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub jitter: f64,
}

impl KernelConfig {
    pub const DEFAULT_LENGTHSCALE: f64 = 0.15;

    pub fn isotropic(dims: usize, lengthscale: f64) -> Self {
        Self {
            signal_variance: 1.0,
            lengthscales: vec![lengthscale; dims],
            jitter: 1e-6,
        }
    }

    pub fn default_for(dims: usize) -> Self {
        Self::isotropic(dims, Self::DEFAULT_LENGTHSCALE)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(GpError::InvalidKernel("signal variance must be positive".into()));
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(GpError::InvalidKernel("lengthscales must be positive".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(GpError::InvalidKernel("jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// `k(x, y)` for points already scaled to the unit cube.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64, GpError> {
        if x.len() != y.len() {
            return Err(GpError::DimensionMismatch(x.len(), y.len()));
        }
        if x.len() != self.lengthscales.len() {
            return Err(GpError::DimensionMismatch(x.len(), self.lengthscales.len()));
        }
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        Ok(self.signal_variance * (-0.5 * r2).exp())
    }
}

/// Kernel value between two grid actions.
pub fn kernel(grid: &ActionGrid, a: &Action, b: &Action, cfg: &KernelConfig) -> Result<f64, GpError> {
    if a.indices.len() != b.indices.len() {
        return Err(GpError::DimensionMismatch(a.indices.len(), b.indices.len()));
    }
    cfg.eval(&grid.normalize(a), &grid.normalize(b))
}

/// Gram matrix of the candidates plus `jitter` on the diagonal.
pub fn prior_covariance(
    grid: &ActionGrid,
    actions: &[Action],
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>, GpError> {
    cfg.validate()?;
    if actions.is_empty() {
        return Err(GpError::Empty);
    }
    let mut seen = HashSet::new();
    for a in actions {
        if !seen.insert(a.id) {
            return Err(GpError::DuplicateAction(a.id));
        }
    }
    let points: Vec<Vec<f64>> = actions.iter().map(|a| grid.normalize(a)).collect();
    let n = points.len();
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        sigma[(i, i)] = cfg.signal_variance + cfg.jitter;
        for j in 0..i {
            let k = cfg.eval(&points[i], &points[j])?;
            sigma[(i, j)] = k;
            sigma[(j, i)] = k;
        }
    }
    Ok(sigma)
}

/// Logistic link `1 / (1 + e^-x)`.
pub fn link(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln link(x)` without cancellation for large |x|.
pub fn log_link(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability that the first action is preferred given latent utilities.
pub fn preference_likelihood(f_win: f64, f_lose: f64, pref_noise: f64) -> f64 {
    link((f_win - f_lose) / pref_noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodConfig {
    /// Expected preference noise `c_p`.
    pub pref_noise: f64,
    /// Expected ordinal noise `c_o`.
    pub ordinal_noise: f64,
    /// Finite interior thresholds `b_1 < ... < b_{N-1}`; the outer thresholds
    /// are always -inf and +inf.
    pub cutpoints: Vec<f64>,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            pref_noise: 0.2,
            ordinal_noise: 1.0,
            cutpoints: vec![-1.0, 1.0],
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.pref_noise > 0.0 && self.pref_noise.is_finite()) {
            return Err(GpError::InvalidLikelihood("preference noise must be positive".into()));
        }
        if !(self.ordinal_noise > 0.0 && self.ordinal_noise.is_finite()) {
            return Err(GpError::InvalidLikelihood("ordinal noise must be positive".into()));
        }
        if self.cutpoints.iter().any(|b| !b.is_finite()) {
            return Err(GpError::InvalidLikelihood("interior thresholds must be finite".into()));
        }
        if self.cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GpError::InvalidLikelihood("thresholds must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Number of ordinal categories `N`.
    pub fn categories(&self) -> usize {
        self.cutpoints.len() + 1
    }

    /// Full threshold vector `b_0 .. b_N` including the infinite ends.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.cutpoints.len() + 2);
        b.push(f64::NEG_INFINITY);
        b.extend_from_slice(&self.cutpoints);
        b.push(f64::INFINITY);
        b
    }

    fn bracket(&self, label: usize) -> Result<(f64, f64), GpError> {
        let n = self.categories();
        if label == 0 || label > n {
            return Err(GpError::LabelOutOfRange { label, categories: n });
        }
        let lo = if label == 1 { f64::NEG_INFINITY } else { self.cutpoints[label - 2] };
        let hi = if label == n { f64::INFINITY } else { self.cutpoints[label - 1] };
        Ok((lo, hi))
    }

    /// Ordinal category of a noise-free utility.
    pub fn category_of(&self, utility: f64) -> usize {
        1 + self.cutpoints.iter().filter(|&&b| utility > b).count()
    }
}

/// Terms of `-ln P(o = r | f)` that depend on `f`. With `u = (b_r - f)/c` and
/// `l = (b_{r-1} - f)/c`, the logistic link factorizes
/// `P = link(u) * link(-l) * (1 - e^(l - u))`, and the last factor is constant in `f`.
struct OrdinalTerms {
    value: f64,
    d1: f64,
    d2: f64,
}

fn ordinal_terms(f: f64, lo: f64, hi: f64, c: f64) -> OrdinalTerms {
    let mut t = OrdinalTerms { value: 0.0, d1: 0.0, d2: 0.0 };
    if hi.is_finite() {
        let u = (hi - f) / c;
        t.value -= log_link(u);
        t.d1 += link(-u) / c;
        t.d2 += link(u) * link(-u) / (c * c);
    }
    if lo.is_finite() {
        let l = (lo - f) / c;
        t.value -= log_link(-l);
        t.d1 -= link(l) / c;
        t.d2 += link(l) * link(-l) / (c * c);
    }
    if lo.is_finite() && hi.is_finite() {
        t.value -= (-((lo - hi) / c).exp_m1()).ln();
    }
    t
}

/// `P(o = label | f)` for a label in `1..=N`.
pub fn ordinal_likelihood(f: f64, label: usize, cfg: &LikelihoodConfig) -> Result<f64, GpError> {
    let (lo, hi) = cfg.bracket(label)?;
    Ok((-ordinal_terms(f, lo, hi, cfg.ordinal_noise).value).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub winner: ActionId,
    pub loser: ActionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalRecord {
    pub action: ActionId,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDataset {
    pub preferences: Vec<PreferenceRecord>,
    pub ordinals: Vec<OrdinalRecord>,
}

impl FeedbackDataset {
    pub fn len(&self) -> usize {
        self.preferences.len() + self.ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resolves action ids to positions in `candidates`.
    pub fn index(&self, candidates: &[ActionId], categories: usize) -> Result<IndexedFeedback, GpError> {
        let pos: HashMap<ActionId, usize> = candidates.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let lookup = |id: ActionId| pos.get(&id).copied().ok_or(GpError::UnknownAction(id));
        let mut preferences = Vec::with_capacity(self.preferences.len());
        for p in &self.preferences {
            if p.winner == p.loser {
                return Err(GpError::SelfPreference(p.winner));
            }
            preferences.push((lookup(p.winner)?, lookup(p.loser)?));
        }
        let mut ordinals = Vec::with_capacity(self.ordinals.len());
        for o in &self.ordinals {
            if o.label == 0 || o.label > categories {
                return Err(GpError::LabelOutOfRange { label: o.label, categories });
            }
            ordinals.push((lookup(o.action)?, o.label));
        }
        Ok(IndexedFeedback { preferences, ordinals })
    }
}

/// Feedback expressed as positions into a candidate vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexedFeedback {
    /// `(winner, loser)` positions.
    pub preferences: Vec<(usize, usize)>,
    /// `(position, label)` pairs.
    pub ordinals: Vec<(usize, usize)>,
}

/// Prior covariance with its cached inverse.
#[derive(Debug, Clone)]
pub struct Prior {
    covariance: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl Prior {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self, GpError> {
        if !covariance.is_square() {
            return Err(GpError::DimensionMismatch(covariance.nrows(), covariance.ncols()));
        }
        let chol = Cholesky::new(covariance.clone()).ok_or(GpError::SingularPrior)?;
        let mut inverse = chol.inverse();
        symmetrize(&mut inverse);
        Ok(Self { covariance, inverse })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }
}

/// Value, gradient and Hessian of the negative log posterior.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn neg_log_value(f: &DVector<f64>, data: &IndexedFeedback, prior: &Prior, cfg: &LikelihoodConfig) -> f64 {
    let sinv_f = prior.inverse() * f;
    let mut value = 0.5 * f.dot(&sinv_f);
    for &(w, l) in &data.preferences {
        value -= log_link((f[w] - f[l]) / cfg.pref_noise);
    }
    for &(i, label) in &data.ordinals {
        let (lo, hi) = cfg.bracket(label).expect("labels validated when indexed");
        value += ordinal_terms(f[i], lo, hi, cfg.ordinal_noise).value;
    }
    value
}

/// `-ln P(D_p | f) - ln P(D_o | f) + f^T Sigma^-1 f / 2`, up to a constant.
pub fn neg_log_posterior(
    f: &DVector<f64>,
    data: &IndexedFeedback,
    prior: &Prior,
    cfg: &LikelihoodConfig,
) -> Result<Objective, GpError> {
    if f.len() != prior.dim() {
        return Err(GpError::DimensionMismatch(f.len(), prior.dim()));
    }
    let sinv_f = prior.inverse() * f;
    let mut value = 0.5 * f.dot(&sinv_f);
    let mut gradient = sinv_f;
    let mut hessian = prior.inverse().clone();
    let cp = cfg.pref_noise;
    for &(w, l) in &data.preferences {
        let z = (f[w] - f[l]) / cp;
        value -= log_link(z);
        let g = link(-z) / cp;
        gradient[w] -= g;
        gradient[l] += g;
        let h = link(z) * link(-z) / (cp * cp);
        hessian[(w, w)] += h;
        hessian[(l, l)] += h;
        hessian[(w, l)] -= h;
        hessian[(l, w)] -= h;
    }
    for &(i, label) in &data.ordinals {
        let (lo, hi) = cfg.bracket(label)?;
        let t = ordinal_terms(f[i], lo, hi, cfg.ordinal_noise);
        value += t.value;
        gradient[i] += t.d1;
        hessian[(i, i)] += t.d2;
    }
    Ok(Objective { value, gradient, hessian })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 100,
        }
    }
}

/// Laplace-approximate posterior over a candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub action_ids: Vec<ActionId>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl PosteriorModel {
    /// The prior itself, used before any feedback arrives.
    pub fn from_prior(action_ids: Vec<ActionId>, covariance: DMatrix<f64>) -> Self {
        let n = action_ids.len();
        Self {
            action_ids,
            mean: DVector::zeros(n),
            covariance,
            converged: true,
            iterations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.action_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_ids.is_empty()
    }

    pub fn position(&self, id: ActionId) -> Option<usize> {
        self.action_ids.iter().position(|a| *a == id)
    }

    pub fn mean_of(&self, id: ActionId) -> Option<f64> {
        self.position(id).map(|i| self.mean[i])
    }

    /// Posterior standard deviation per candidate.
    pub fn std_dev(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Fits the Laplace posterior for candidates drawn from `grid`.
pub fn laplace_fit(
    grid: &ActionGrid,
    candidates: &[Action],
    data: &FeedbackDataset,
    kernel: &KernelConfig,
    likelihood: &LikelihoodConfig,
) -> Result<PosteriorModel, GpError> {
    let sigma = prior_covariance(grid, candidates, kernel)?;
    let ids: Vec<ActionId> = candidates.iter().map(|a| a.id).collect();
    fit_with_prior(&ids, sigma, data, likelihood, NewtonOptions::default(), None)
}

/// Damped Newton search for the posterior mode with an explicit prior.
/// `warm_start` maps candidate ids to initial utilities.
pub fn fit_with_prior(
    ids: &[ActionId],
    sigma: DMatrix<f64>,
    data: &FeedbackDataset,
    likelihood: &LikelihoodConfig,
    opts: NewtonOptions,
    warm_start: Option<&HashMap<ActionId, f64>>,
) -> Result<PosteriorModel, GpError> {
    likelihood.validate()?;
    if ids.is_empty() {
        return Err(GpError::Empty);
    }
    if sigma.nrows() != ids.len() {
        return Err(GpError::DimensionMismatch(sigma.nrows(), ids.len()));
    }
    let indexed = data.index(ids, likelihood.categories())?;
    let prior = Prior::new(sigma)?;
    if data.is_empty() {
        return Ok(PosteriorModel::from_prior(ids.to_vec(), prior.covariance));
    }

    let mut f = DVector::from_iterator(
        ids.len(),
        ids.iter()
            .map(|id| warm_start.and_then(|w| w.get(id).copied()).unwrap_or(0.0)),
    );
    let mut obj = neg_log_posterior(&f, &indexed, &prior, likelihood)?;
    let abs_inverse = prior.inverse().abs();
    let mut iterations = 0;
    loop {
        let chol = Cholesky::new(obj.hessian.clone()).ok_or(GpError::IndefiniteHessian(iterations))?;
        let gradient_norm = obj.gradient.amax();
        let step = -chol.solve(&obj.gradient);
        let slope = obj.gradient.dot(&step);
        // With a badly conditioned prior the gradient bottoms out near
        // cond(Sigma) * eps. Stop once the Newton decrement is below the
        // rounding error of f^T Sigma^-1 f: no step can be seen to help.
        let f_abs = f.abs();
        let resolution = 16.0 * f64::EPSILON * f_abs.dot(&(&abs_inverse * &f_abs));
        let floor = resolution.max(1e-12 * (1.0 + obj.value.abs()));
        if gradient_norm < opts.tolerance || -0.5 * slope <= floor {
            let mut covariance = chol.inverse();
            symmetrize(&mut covariance);
            return Ok(PosteriorModel {
                action_ids: ids.to_vec(),
                mean: f,
                covariance,
                converged: true,
                iterations,
            });
        }
        if iterations >= opts.max_iterations {
            return Err(GpError::NotConverged { iterations, gradient_norm });
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &f + &step * t;
            if neg_log_value(&trial, &indexed, &prior, likelihood) <= obj.value + 1e-4 * t * slope {
                f = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            f += &step;
        }
        obj = neg_log_posterior(&f, &indexed, &prior, likelihood)?;
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Lower factor `L` with `L L^T = covariance`. Falls back to a clipped
/// eigen-decomposition for singular but positive-semidefinite matrices.
pub fn covariance_factor(covariance: &DMatrix<f64>) -> Result<DMatrix<f64>, GpError> {
    if let Some(chol) = Cholesky::<f64, Dyn>::new(covariance.clone()) {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new(covariance.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let min = eig.eigenvalues.min();
    if !min.is_finite() || min < -1e-8 * scale {
        return Err(GpError::NotPositiveSemidefinite(min));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

pub fn posterior_sample_with<R: Rng + ?Sized>(model: &PosteriorModel, rng: &mut R) -> Result<DVector<f64>, GpError> {
    let factor = covariance_factor(&model.covariance)?;
    let z = DVector::from_fn(model.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(&model.mean + factor * z)
}

/// One draw from `N(mean, covariance)`.
pub fn posterior_sample(model: &PosteriorModel, seed: u64) -> Result<DVector<f64>, GpError> {
    posterior_sample_with(model, &mut ChaCha8Rng::seed_from_u64(seed))
}

//! Riccati solution and rapidly exponentially stabilizing CLF for the
//! block double-integrator output dynamics `eta' = F eta + G nu`, where
//! `eta = (y, y')` stacks all output positions before all velocities.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::PlantError;

/// `F = [[0, I], [0, 0]]` for `outputs` outputs.
pub fn drift_matrix(outputs: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(2 * outputs, 2 * outputs);
    for i in 0..outputs {
        f[(i, outputs + i)] = 1.0;
    }
    f
}

/// `G = [0; I]` for `outputs` outputs.
pub fn input_matrix(outputs: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(2 * outputs, outputs);
    for i in 0..outputs {
        g[(outputs + i, i)] = 1.0;
    }
    g
}

pub(crate) fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && Cholesky::new(m.clone()).is_some()
}

/// `F^T P + P F - P G R^-1 G^T P + Q`.
pub fn care_residual(q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>, PlantError> {
    let outputs = r.nrows();
    let f = drift_matrix(outputs);
    let g = input_matrix(outputs);
    let r_inv = r.clone().try_inverse().ok_or(PlantError::NotPositiveDefinite("R"))?;
    Ok(f.transpose() * p + p * &f - p * &g * r_inv * g.transpose() * p + q)
}

/// CARE solution `P`, the scaled `P_eps = I_eps P I_eps`, and the decay rate
/// `gamma = lambda_min(Q) / lambda_max(P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfCertificate {
    pub p: DMatrix<f64>,
    pub p_eps: DMatrix<f64>,
    pub epsilon: f64,
    pub gamma: f64,
    pub residual: f64,
}

impl ClfCertificate {
    pub fn outputs(&self) -> usize {
        self.p.nrows() / 2
    }

    /// Re-scales the certificate for a different `epsilon`.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self, PlantError> {
        if !(epsilon > 0.0 && epsilon < 1.0) && epsilon != 1.0 {
            return Err(PlantError::InvalidGains(format!("epsilon {epsilon} outside (0, 1)")));
        }
        let scale = scaling(self.outputs(), epsilon);
        self.p_eps = &scale * &self.p * &scale;
        self.epsilon = epsilon;
        Ok(self)
    }

    /// Guaranteed exponential decay rate `gamma / epsilon` of `V`.
    pub fn rate(&self) -> f64 {
        self.gamma / self.epsilon
    }
}

/// `I_eps = diag(I / eps, I)`.
fn scaling(outputs: usize, epsilon: f64) -> DMatrix<f64> {
    let mut diag = DVector::from_element(2 * outputs, 1.0);
    for i in 0..outputs {
        diag[i] = 1.0 / epsilon;
    }
    DMatrix::from_diagonal(&diag)
}

/// Solves the Riccati equation per output block in closed form. `Q` may couple
/// only the position and velocity of the same output, and `R` must be
/// diagonal, so the problem splits into `outputs` scalar double integrators:
///
/// `p12 = sqrt(q11 r)`, `p22 = sqrt(r (q22 + 2 p12))`, `p11 = p12 p22 / r - q12`.
///
/// The returned certificate has `epsilon = 1`; see [`ClfCertificate::with_epsilon`].
pub fn solve_care(q: &DMatrix<f64>, r: &DMatrix<f64>, outputs: usize) -> Result<ClfCertificate, PlantError> {
    let n = 2 * outputs;
    if outputs == 0 || q.shape() != (n, n) || r.shape() != (outputs, outputs) {
        return Err(PlantError::Dimension(format!(
            "Q {:?} and R {:?} for {outputs} outputs",
            q.shape(),
            r.shape()
        )));
    }
    if !is_positive_definite(q) {
        return Err(PlantError::NotPositiveDefinite("Q"));
    }
    if !is_positive_definite(r) {
        return Err(PlantError::NotPositiveDefinite("R"));
    }
    let block_of = |k: usize| k % outputs;
    for i in 0..n {
        for j in 0..n {
            if block_of(i) != block_of(j) && q[(i, j)] != 0.0 {
                return Err(PlantError::Coupled("Q"));
            }
        }
    }
    for i in 0..outputs {
        for j in 0..outputs {
            if i != j && r[(i, j)] != 0.0 {
                return Err(PlantError::Coupled("R"));
            }
        }
    }

    let mut p = DMatrix::zeros(n, n);
    for i in 0..outputs {
        let (q11, q12, q22, ri) = (q[(i, i)], q[(i, outputs + i)], q[(outputs + i, outputs + i)], r[(i, i)]);
        let p12 = (q11 * ri).sqrt();
        let p22 = (ri * (q22 + 2.0 * p12)).sqrt();
        let p11 = p12 * p22 / ri - q12;
        p[(i, i)] = p11;
        p[(i, outputs + i)] = p12;
        p[(outputs + i, i)] = p12;
        p[(outputs + i, outputs + i)] = p22;
    }
    if !is_positive_definite(&p) {
        return Err(PlantError::NotPositiveDefinite("P"));
    }
    let lambda_min_q = SymmetricEigen::new(q.clone()).eigenvalues.min();
    let lambda_max_p = SymmetricEigen::new(p.clone()).eigenvalues.max();
    let residual = care_residual(q, r, &p)?.norm();
    Ok(ClfCertificate {
        p_eps: p.clone(),
        p,
        epsilon: 1.0,
        gamma: lambda_min_q / lambda_max_p,
        residual,
    })
}

/// `V(eta) = eta^T P_eps eta`.
pub fn clf_value(eta: &DVector<f64>, cert: &ClfCertificate) -> f64 {
    eta.dot(&(&cert.p_eps * eta))
}

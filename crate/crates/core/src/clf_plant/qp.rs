//! CLF quadratic programs over a torque box.
//!
//! Both controllers minimize `|c + A u|^2` (the squared output acceleration,
//! with `c = L_f^2 y` and `A = L_g L_f y`) plus a CLF term, subject to
//! `u_min <= u <= u_max`. Control dimensions are small, so the box is handled
//! exactly by enumerating every face and keeping the one whose solution
//! satisfies the KKT conditions.

use nalgebra::{DMatrix, DVector};

use super::care::{drift_matrix, input_matrix, ClfCertificate};
use super::PlantError;

/// Affine data of one control step: `y'' = lf2y + decoupling * u` and
/// `V' = lfv + lgv . u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub lf2y: DVector<f64>,
    pub decoupling: DMatrix<f64>,
    pub v: f64,
    pub lfv: f64,
    pub lgv: DVector<f64>,
}

impl ControlProblem {
    pub fn new(eta: &DVector<f64>, lf2y: DVector<f64>, decoupling: DMatrix<f64>, cert: &ClfCertificate) -> Self {
        let outputs = cert.outputs();
        let pe_eta = &cert.p_eps * eta;
        let gt_pe_eta = input_matrix(outputs).transpose() * &pe_eta;
        let drift = drift_matrix(outputs) * eta;
        let lfv = 2.0 * pe_eta.dot(&drift) + 2.0 * gt_pe_eta.dot(&lf2y);
        let lgv = 2.0 * decoupling.transpose() * &gt_pe_eta;
        Self {
            v: eta.dot(&pe_eta),
            lf2y,
            decoupling,
            lfv,
            lgv,
        }
    }

    pub fn vdot(&self, u: &DVector<f64>) -> f64 {
        self.lfv + self.lgv.dot(u)
    }

    /// Input that zeroes the output acceleration.
    pub fn feedback_linearizing(&self) -> Result<DVector<f64>, PlantError> {
        self.decoupling
            .clone()
            .lu()
            .solve(&(-&self.lf2y))
            .ok_or(PlantError::SingularDecoupling)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorqueBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl TorqueBox {
    pub fn unbounded(m: usize) -> Self {
        Self {
            lower: DVector::from_element(m, f64::NEG_INFINITY),
            upper: DVector::from_element(m, f64::INFINITY),
        }
    }

    pub fn symmetric(m: usize, limit: f64) -> Self {
        Self {
            lower: DVector::from_element(m, -limit),
            upper: DVector::from_element(m, limit),
        }
    }
}

/// `J(u) = |c + A u|^2 + rho (a.u + b)^2 + kappa a.u`.
struct Objective<'a> {
    c: &'a DVector<f64>,
    a_mat: &'a DMatrix<f64>,
    a: &'a DVector<f64>,
    b: f64,
    rho: f64,
    kappa: f64,
}

impl Objective<'_> {
    fn value(&self, u: &DVector<f64>) -> f64 {
        let r = self.c + self.a_mat * u;
        let s = self.a.dot(u);
        r.norm_squared() + self.rho * (s + self.b).powi(2) + self.kappa * s
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let r = self.c + self.a_mat * u;
        2.0 * self.a_mat.transpose() * r + self.a * (2.0 * self.rho * (self.a.dot(u) + self.b) + self.kappa)
    }

    /// Minimizer with the coordinates in `fixed` pinned to the given values.
    /// The rank-one `rho` term is applied through Sherman-Morrison so very
    /// large weights stay well conditioned.
    fn face_minimizer(&self, fixed: &[Option<f64>]) -> Option<DVector<f64>> {
        let m = fixed.len();
        let free: Vec<usize> = (0..m).filter(|&j| fixed[j].is_none()).collect();
        let mut u = DVector::from_iterator(m, fixed.iter().map(|v| v.unwrap_or(0.0)));
        if free.is_empty() {
            return Some(u);
        }
        let c_eff = self.c + self.a_mat * &u;
        let b_eff = self.b + self.a.dot(&u);
        let a_free = self.a_mat.select_columns(&free);
        let lin_free = DVector::from_iterator(free.len(), free.iter().map(|&j| self.a[j]));
        let gram = a_free.transpose() * &a_free;
        let chol = gram.cholesky()?;
        let rhs = -(a_free.transpose() * c_eff) - &lin_free * (0.5 * self.kappa);
        let u0 = chol.solve(&rhs);
        let s = chol.solve(&lin_free);
        let t = self.rho * (lin_free.dot(&u0) + b_eff) / (1.0 + self.rho * lin_free.dot(&s));
        let sol = u0 - s * t;
        for (k, &j) in free.iter().enumerate() {
            u[j] = sol[k];
        }
        Some(u)
    }

    /// Exact box-constrained minimizer by face enumeration. `piece` restricts
    /// accepted points to a region where this quadratic is the true objective.
    fn minimize_on_box(&self, bounds: &TorqueBox, piece: impl Fn(&DVector<f64>) -> bool) -> Option<DVector<f64>> {
        let m = bounds.lower.len();
        let scale = 1.0 + self.c.amax() + self.a.amax() * (1.0 + self.rho.abs() + self.kappa.abs());
        let tol = 1e-9 * scale;
        let mut best: Option<(f64, DVector<f64>)> = None;
        'faces: for code in 0..3usize.pow(m as u32) {
            let mut fixed = Vec::with_capacity(m);
            let mut rest = code;
            for j in 0..m {
                let slot = match rest % 3 {
                    0 => None,
                    1 => Some(bounds.lower[j]),
                    _ => Some(bounds.upper[j]),
                };
                rest /= 3;
                if slot.is_some_and(|v| !v.is_finite()) {
                    continue 'faces;
                }
                fixed.push(slot);
            }
            let Some(u) = self.face_minimizer(&fixed) else { continue };
            let g = self.gradient(&u);
            let span = |j: usize| tol * (1.0 + u[j].abs());
            let kkt = (0..m).all(|j| match fixed[j] {
                None => u[j] >= bounds.lower[j] - span(j) && u[j] <= bounds.upper[j] + span(j),
                Some(v) if v == bounds.lower[j] => g[j] >= -tol * (1.0 + g.amax()),
                Some(_) => g[j] <= tol * (1.0 + g.amax()),
            });
            if !kkt || !piece(&u) {
                continue;
            }
            let u = clamp(&u, bounds);
            let value = self.value(&u);
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, u));
            }
        }
        best.map(|(_, u)| u)
    }
}

fn clamp(u: &DVector<f64>, bounds: &TorqueBox) -> DVector<f64> {
    DVector::from_iterator(
        u.len(),
        u.iter().enumerate().map(|(j, &x)| x.clamp(bounds.lower[j], bounds.upper[j])),
    )
}

fn check_bounds(problem: &ControlProblem, bounds: &TorqueBox) -> Result<(), PlantError> {
    let m = problem.decoupling.ncols();
    if bounds.lower.len() != m || bounds.upper.len() != m || problem.lgv.len() != m {
        return Err(PlantError::Dimension(format!("{m} inputs vs bounds {}", bounds.lower.len())));
    }
    if bounds.lower.iter().zip(bounds.upper.iter()).any(|(l, u)| !(l < u)) {
        return Err(PlantError::InvalidGains("torque lower bound must be below upper bound".into()));
    }
    Ok(())
}

/// Solution of the relaxed CLF-QP.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSolution {
    pub u: DVector<f64>,
    pub delta: f64,
}

/// `min |c + A u|^2 + w delta^2` s.t. `V' <= -rate V + delta` and the box.
///
/// For fixed `u` the optimal relaxation is `delta = max(0, V' + rate V)`, so
/// the program is a convex piecewise quadratic in `u` alone; each piece is
/// solved exactly over the box.
pub fn solve_clf_qp_delta(
    problem: &ControlProblem,
    rate: f64,
    w_vdot: f64,
    bounds: &TorqueBox,
) -> Result<DeltaSolution, PlantError> {
    check_bounds(problem, bounds)?;
    let b = problem.lfv + rate * problem.v;
    let g = |u: &DVector<f64>| problem.lgv.dot(u) + b;
    let slack = 1e-12 * (1.0 + b.abs() + problem.lgv.amax());
    let inactive = Objective {
        c: &problem.lf2y,
        a_mat: &problem.decoupling,
        a: &problem.lgv,
        b,
        rho: 0.0,
        kappa: 0.0,
    };
    let active = Objective { rho: w_vdot, ..inactive };
    let candidates = [
        inactive.minimize_on_box(bounds, |u| g(u) <= slack),
        active.minimize_on_box(bounds, |u| g(u) >= -slack),
    ];
    let u = candidates
        .into_iter()
        .flatten()
        .map(|u| {
            let value = inactive.value(&u) + w_vdot * g(&u).max(0.0).powi(2);
            (value, u)
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, u)| u)
        .ok_or(PlantError::QpFailed)?;
    let delta = g(&u).max(0.0);
    Ok(DeltaSolution { u, delta })
}

/// `min |c + A u|^2 + w V'(u)` s.t. the box.
pub fn solve_clf_qp_plus(problem: &ControlProblem, w_vdot: f64, bounds: &TorqueBox) -> Result<DVector<f64>, PlantError> {
    check_bounds(problem, bounds)?;
    let objective = Objective {
        c: &problem.lf2y,
        a_mat: &problem.decoupling,
        a: &problem.lgv,
        b: 0.0,
        rho: 0.0,
        kappa: w_vdot,
    };
    objective.minimize_on_box(bounds, |_| true).ok_or(PlantError::QpFailed)
}

/// Gradient of the CLF-QP+ objective at `u`.
pub fn qp_plus_gradient(problem: &ControlProblem, w_vdot: f64, u: &DVector<f64>) -> DVector<f64> {
    Objective {
        c: &problem.lf2y,
        a_mat: &problem.decoupling,
        a: &problem.lgv,
        b: 0.0,
        rho: 0.0,
        kappa: w_vdot,
    }
    .gradient(u)
}

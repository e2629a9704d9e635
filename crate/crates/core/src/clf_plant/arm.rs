//! Fully actuated two-link planar arm in a vertical plane.
//!
//! Outputs are joint angles minus a smooth periodic reference, so the output
//! is relative degree two with decoupling matrix `M(q)^-1`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::PlantError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    /// Point masses at the distal end of each link (kg).
    pub masses: [f64; 2],
    /// Link lengths (m).
    pub lengths: [f64; 2],
    pub gravity: f64,
    /// Viscous joint damping (N m s / rad).
    pub damping: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            masses: [1.0, 1.0],
            lengths: [0.5, 0.5],
            gravity: 9.81,
            damping: 0.0,
        }
    }
}

impl ArmParams {
    pub fn mass_matrix(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let [m1, m2] = self.masses;
        let [l1, l2] = self.lengths;
        let c2 = q[1].cos();
        let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
        let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
        let m22 = m2 * l2 * l2;
        Matrix2::new(m11, m12, m12, m22)
    }

    /// Coriolis, centrifugal, gravity and damping torques.
    pub fn bias(&self, q: &Vector2<f64>, qd: &Vector2<f64>) -> Vector2<f64> {
        let [m1, m2] = self.masses;
        let [l1, l2] = self.lengths;
        let h = m2 * l1 * l2 * q[1].sin();
        let coriolis = Vector2::new(-h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]), h * qd[0] * qd[0]);
        let g = self.gravity;
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        let gravity = Vector2::new((m1 + m2) * g * l1 * c1 + m2 * g * l2 * c12, m2 * g * l2 * c12);
        coriolis + gravity + qd * self.damping
    }

    pub fn acceleration(&self, q: &Vector2<f64>, qd: &Vector2<f64>, u: &Vector2<f64>) -> Result<Vector2<f64>, PlantError> {
        let m = self.mass_matrix(q);
        m.lu().solve(&(u - self.bias(q, qd))).ok_or(PlantError::SingularDecoupling)
    }

    pub fn energy(&self, q: &Vector2<f64>, qd: &Vector2<f64>) -> f64 {
        let [m1, m2] = self.masses;
        let [l1, l2] = self.lengths;
        let kinetic = 0.5 * qd.dot(&(self.mass_matrix(q) * qd));
        let potential = (m1 + m2) * self.gravity * l1 * q[0].sin() + m2 * self.gravity * l2 * (q[0] + q[1]).sin();
        kinetic + potential
    }
}

/// Periodic joint reference `offset + amplitude (sin(w t) + 0.3 sin(2 w t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub offset: [f64; 2],
    pub amplitude: [f64; 2],
    pub period: f64,
}

impl Default for Reference {
    fn default() -> Self {
        Self {
            offset: [-0.6, 1.0],
            amplitude: [0.3, 0.4],
            period: 2.0,
        }
    }
}

impl Reference {
    /// Position, velocity and acceleration at phase `tau`.
    pub fn eval(&self, tau: f64) -> [Vector2<f64>; 3] {
        let w = std::f64::consts::TAU / self.period;
        let (s1, c1) = (w * tau).sin_cos();
        let (s2, c2) = (2.0 * w * tau).sin_cos();
        let amp = Vector2::from(self.amplitude);
        [
            Vector2::from(self.offset) + amp * (s1 + 0.3 * s2),
            amp * (w * (c1 + 0.6 * c2)),
            amp * (-w * w * (s1 + 1.2 * s2)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: Vector2<f64>,
    pub qd: Vector2<f64>,
    /// Phase along the reference, in `[0, period)`.
    pub tau: f64,
}

impl PlantState {
    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite()) && self.tau.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.q.norm_squared() + self.qd.norm_squared()).sqrt()
    }

    /// State whose outputs are `eta = (y, y')` at phase `tau`.
    pub fn from_outputs(reference: &Reference, tau: f64, y: Vector2<f64>, yd: Vector2<f64>) -> Self {
        let [qd_ref, qdot_ref, _] = reference.eval(tau);
        Self {
            q: qd_ref + y,
            qd: qdot_ref + yd,
            tau,
        }
    }
}

/// Output-dynamics terms at one state: `y'' = lf2y + decoupling * u`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDynamics {
    pub lf2y: DVector<f64>,
    pub decoupling: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub eta_dot: DVector<f64>,
}

/// Output dynamics of `arm` tracking `reference` at `state` under input `u`.
pub fn output_dynamics(
    state: &PlantState,
    arm: &ArmParams,
    reference: &Reference,
    u: &Vector2<f64>,
) -> Result<OutputDynamics, PlantError> {
    let m_inv = arm.mass_matrix(&state.q).try_inverse().ok_or(PlantError::SingularDecoupling)?;
    let [pos, vel, acc] = reference.eval(state.tau);
    let lf2y = -m_inv * arm.bias(&state.q, &state.qd) - acc;
    let y = state.q - pos;
    let yd = state.qd - vel;
    let ydd = lf2y + m_inv * u;
    Ok(OutputDynamics {
        lf2y: DVector::from_column_slice(lf2y.as_slice()),
        decoupling: DMatrix::from_column_slice(2, 2, m_inv.as_slice()),
        eta: DVector::from_vec(vec![y[0], y[1], yd[0], yd[1]]),
        eta_dot: DVector::from_vec(vec![yd[0], yd[1], ydd[0], ydd[1]]),
    })
}

/// One fourth-order Runge-Kutta step of the closed loop. `control` is
/// evaluated at every stage, so a constant closure gives a zero-order hold and
/// a state-feedback closure integrates the continuous-time loop. The phase
/// advances with time and wraps at `period`.
pub fn rk4_step<F>(arm: &ArmParams, state: &PlantState, dt: f64, period: f64, mut control: F) -> Result<PlantState, PlantError>
where
    F: FnMut(&PlantState) -> Result<Vector2<f64>, PlantError>,
{
    let mut deriv = |s: &PlantState| -> Result<(Vector2<f64>, Vector2<f64>), PlantError> {
        let u = control(s)?;
        Ok((s.qd, arm.acceleration(&s.q, &s.qd, &u)?))
    };
    let shifted = |k: (Vector2<f64>, Vector2<f64>), h: f64| PlantState {
        q: state.q + k.0 * h,
        qd: state.qd + k.1 * h,
        tau: state.tau + h,
    };
    let k1 = deriv(state)?;
    let k2 = deriv(&shifted(k1, 0.5 * dt))?;
    let k3 = deriv(&shifted(k2, 0.5 * dt))?;
    let k4 = deriv(&shifted(k3, dt))?;
    let mut tau = state.tau + dt;
    if tau >= period {
        tau -= period;
    }
    Ok(PlantState {
        q: state.q + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (dt / 6.0),
        qd: state.qd + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (dt / 6.0),
        tau,
    })
}

/// Input that makes `y'' = 0` at `state`.
pub fn tracking_input(state: &PlantState, arm: &ArmParams, reference: &Reference) -> Result<Vector2<f64>, PlantError> {
    let od = output_dynamics(state, arm, reference, &Vector2::zeros())?;
    let u = od.decoupling.lu().solve(&(-od.lf2y)).ok_or(PlantError::SingularDecoupling)?;
    Ok(Vector2::new(u[0], u[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reference_derivatives_match_differences() {
        let r = Reference::default();
        let h = 1e-5;
        for tau in [0.0, 0.37, 1.2, 1.9] {
            let [_, v, a] = r.eval(tau);
            let [pp, vp, _] = r.eval(tau + h);
            let [pm, vm, _] = r.eval(tau - h);
            assert_relative_eq!((pp - pm) / (2.0 * h), v, epsilon = 1e-7);
            assert_relative_eq!((vp - vm) / (2.0 * h), a, epsilon = 1e-6);
        }
    }

    #[test]
    fn feedback_linearization_zeroes_output_acceleration() {
        let arm = ArmParams::default();
        let r = Reference::default();
        let state = PlantState {
            q: Vector2::new(0.3, -0.8),
            qd: Vector2::new(1.1, 0.4),
            tau: 0.7,
        };
        let od = output_dynamics(&state, &arm, &r, &Vector2::zeros()).unwrap();
        let u = od.decoupling.clone().lu().solve(&(-&od.lf2y)).unwrap();
        let od = output_dynamics(&state, &arm, &r, &Vector2::new(u[0], u[1])).unwrap();
        assert!(od.eta_dot.rows(2, 2).norm() < 1e-10);
    }

    #[test]
    fn eta_dot_matches_step_differences() {
        let arm = ArmParams::default();
        let r = Reference::default();
        let state = PlantState {
            q: Vector2::new(-0.4, 0.9),
            qd: Vector2::new(-0.5, 0.8),
            tau: 0.2,
        };
        let u = Vector2::new(3.0, -1.0);
        let od = output_dynamics(&state, &arm, &r, &u).unwrap();
        let error = |h: f64| {
            let next = rk4_step(&arm, &state, h, r.period, |_| Ok(u)).unwrap();
            let eta_next = output_dynamics(&next, &arm, &r, &u).unwrap().eta;
            ((eta_next - &od.eta) / h - &od.eta_dot).norm()
        };
        let (e1, e2, e3) = (error(1e-3), error(5e-4), error(2.5e-4));
        // First-order convergence: halving h halves the error.
        assert!((e1 / e2 - 2.0).abs() < 0.1, "{e1} {e2}");
        assert!((e2 / e3 - 2.0).abs() < 0.1, "{e2} {e3}");
    }

    #[test]
    fn exact_tracking_stays_on_zero_dynamics() {
        let arm = ArmParams::default();
        let r = Reference::default();
        let mut state = PlantState::from_outputs(&r, 0.0, Vector2::zeros(), Vector2::zeros());
        let dt = 1e-3;
        for _ in 0..2000 {
            state = rk4_step(&arm, &state, dt, r.period, |s| tracking_input(s, &arm, &r)).unwrap();
            let eta = output_dynamics(&state, &arm, &r, &Vector2::zeros()).unwrap().eta;
            assert!(eta.norm() < 1e-10, "eta drifted to {}", eta.norm());
        }
    }

    #[test]
    fn free_motion_conserves_energy() {
        let arm = ArmParams::default();
        let period = Reference::default().period;
        let mut state = PlantState {
            q: Vector2::new(0.2, 0.5),
            qd: Vector2::new(0.0, 0.0),
            tau: 0.0,
        };
        let e0 = arm.energy(&state.q, &state.qd);
        let dt = 1e-3;
        for _ in 0..(period / dt).round() as usize {
            state = rk4_step(&arm, &state, dt, period, |_| Ok(Vector2::zeros())).unwrap();
        }
        let e1 = arm.energy(&state.q, &state.qd);
        assert!(((e1 - e0) / e0).abs() < 1e-6, "relative drift {}", (e1 - e0) / e0);
    }
}

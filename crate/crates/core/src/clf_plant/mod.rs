//! Control stack that turns a gain action into walking-quality proxies:
//! Riccati-based RES-CLF, CLF-QP controllers with torque bounds, and a
//! simulated relative-degree-two plant.

pub mod arm;
pub mod care;
pub mod episode;
pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arm::{output_dynamics, ArmParams, OutputDynamics, PlantState, Reference};
pub use care::{clf_value, solve_care, ClfCertificate};
pub use episode::{linear_output_rollout, simulate_episode, Controller, EpisodeMetrics, PlantConfig};
pub use qp::{solve_clf_qp_delta, solve_clf_qp_plus, ControlProblem, DeltaSolution, TorqueBox};

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("{0} couples different outputs; only per-output blocks are supported")]
    Coupled(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("decoupling matrix is singular")]
    SingularDecoupling,
    #[error("no face of the torque box satisfied the KKT conditions")]
    QpFailed,
}

/// Controller tuning variables derived from an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfGains {
    /// `2p x 2p` output weight, positions before velocities.
    pub q: DMatrix<f64>,
    /// `p x p` input weight.
    pub r: DMatrix<f64>,
    pub epsilon: f64,
    pub w_vdot: f64,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl ClfGains {
    pub fn outputs(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let p = self.outputs();
        if self.q.shape() != (2 * p, 2 * p) {
            return Err(PlantError::Dimension(format!("Q is {:?} for {p} outputs", self.q.shape())));
        }
        if !care::is_positive_definite(&self.q) {
            return Err(PlantError::NotPositiveDefinite("Q"));
        }
        if !care::is_positive_definite(&self.r) {
            return Err(PlantError::NotPositiveDefinite("R"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(PlantError::InvalidGains(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if !(self.w_vdot > 0.0 && self.w_vdot.is_finite()) {
            return Err(PlantError::InvalidGains(format!("w_vdot {} must be positive", self.w_vdot)));
        }
        if self.u_min.len() != self.u_max.len() {
            return Err(PlantError::Dimension("torque bounds differ in length".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(PlantError::InvalidGains("u_min must be below u_max".into()));
        }
        Ok(())
    }

    /// CARE solution scaled by this `epsilon`.
    pub fn certificate(&self) -> Result<ClfCertificate, PlantError> {
        self.validate()?;
        solve_care(&self.q, &self.r, self.outputs())?.with_epsilon(self.epsilon)
    }

    pub fn torque_box(&self) -> TorqueBox {
        TorqueBox {
            lower: self.u_min.clone(),
            upper: self.u_max.clone(),
        }
    }

    pub fn with_torque_limit(mut self, limit: f64) -> Self {
        let m = self.u_min.len();
        self.u_min = DVector::from_element(m, -limit);
        self.u_max = DVector::from_element(m, limit);
        self
    }
}

/// How action values map onto [`ClfGains`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainProfile {
    /// Six values: knee/hip position weights, knee/hip velocity weights,
    /// epsilon and w_vdot, over four outputs.
    Amber,
    /// Two values: position and velocity weight shared by both arm joints.
    Toy,
}

impl GainProfile {
    pub const TOY_EPSILON: f64 = 0.2;
    pub const TOY_W_VDOT: f64 = 1.0;
    pub const TOY_TORQUE_LIMIT: f64 = 40.0;

    pub fn dims(self) -> usize {
        match self {
            GainProfile::Amber => 6,
            GainProfile::Toy => 2,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "amber" => Some(GainProfile::Amber),
            "toy" => Some(GainProfile::Toy),
            _ => None,
        }
    }
}

/// Builds controller gains from raw action values.
pub fn gains_from_values(values: &[f64], profile: GainProfile) -> Result<ClfGains, PlantError> {
    if values.len() != profile.dims() {
        return Err(PlantError::Dimension(format!(
            "{profile:?} profile takes {} values, got {}",
            profile.dims(),
            values.len()
        )));
    }
    let gains = match profile {
        GainProfile::Amber => {
            let (k_pos, h_pos, k_vel, h_vel) = (values[0], values[1], values[2], values[3]);
            let diag = [k_pos, h_pos, h_pos, k_pos, k_vel, h_vel, h_vel, k_vel];
            ClfGains {
                q: DMatrix::from_diagonal(&DVector::from_row_slice(&diag)),
                r: DMatrix::identity(4, 4),
                epsilon: values[4],
                w_vdot: values[5],
                u_min: DVector::from_element(4, f64::NEG_INFINITY),
                u_max: DVector::from_element(4, f64::INFINITY),
            }
        }
        GainProfile::Toy => {
            let diag = [values[0], values[0], values[1], values[1]];
            ClfGains {
                q: DMatrix::from_diagonal(&DVector::from_row_slice(&diag)),
                r: DMatrix::identity(2, 2),
                epsilon: GainProfile::TOY_EPSILON,
                w_vdot: GainProfile::TOY_W_VDOT,
                u_min: DVector::from_element(2, -GainProfile::TOY_TORQUE_LIMIT),
                u_max: DVector::from_element(2, GainProfile::TOY_TORQUE_LIMIT),
            }
        }
    };
    Ok(gains)
}

pub fn gains_from_action(action: &crate::action_space::Action, profile: GainProfile) -> Result<ClfGains, PlantError> {
    gains_from_values(&action.values, profile)
}

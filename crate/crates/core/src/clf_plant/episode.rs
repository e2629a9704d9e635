//! Closed-loop episodes on the two-link arm and on the bare output system.

use nalgebra::{DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arm::{output_dynamics, rk4_step, ArmParams, PlantState, Reference};
use super::care::{clf_value, drift_matrix, input_matrix, ClfCertificate};
use super::qp::{solve_clf_qp_delta, solve_clf_qp_plus, ControlProblem, TorqueBox};
use super::{ClfGains, PlantError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Delta,
    Plus,
}

impl Controller {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "delta" => Some(Controller::Delta),
            "plus" => Some(Controller::Plus),
            _ => None,
        }
    }

    /// Torque for one output-dynamics snapshot.
    pub fn torque(self, problem: &ControlProblem, cert: &ClfCertificate, gains: &ClfGains, bounds: &TorqueBox) -> Result<DVector<f64>, PlantError> {
        match self {
            Controller::Delta => Ok(solve_clf_qp_delta(problem, cert.rate(), gains.w_vdot, bounds)?.u),
            Controller::Plus => solve_clf_qp_plus(problem, gains.w_vdot, bounds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Arm the controller believes it is driving.
    pub model: ArmParams,
    /// Extra mass on the distal link of the simulated arm, unknown to the controller.
    pub payload: f64,
    pub reference: Reference,
    /// Initial output error `y(0)`; `y'(0) = 0`.
    pub initial_error: [f64; 2],
    pub dt: f64,
    /// Hold each torque for `control_every` steps instead of re-solving the
    /// QP inside every integrator stage.
    pub zero_order_hold: bool,
    /// Dynamics steps per control update under a zero-order hold.
    pub control_every: usize,
    /// Std. dev. of additive noise on measured joint positions and velocities.
    pub sensor_noise: f64,
    pub noise_seed: u64,
    /// State norm treated as a fall.
    pub guard: f64,
    /// Overrides the torque bounds of the gains when set.
    pub torque_limit: Option<f64>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            model: ArmParams::default(),
            payload: 0.3,
            reference: Reference::default(),
            initial_error: [0.2, -0.2],
            dt: 1e-3,
            zero_order_hold: false,
            control_every: 1,
            sensor_noise: 0.0,
            noise_seed: 0,
            guard: 1e3,
            torque_limit: None,
        }
    }
}

impl PlantConfig {
    pub fn true_arm(&self) -> ArmParams {
        let mut arm = self.model;
        arm.masses[1] += self.payload;
        arm
    }

    fn validate(&self) -> Result<(), PlantError> {
        let bad = |what: &str| Err(PlantError::InvalidGains(what.to_string()));
        if !(self.dt > 0.0) || self.control_every == 0 {
            return bad("dt must be positive and control_every at least 1");
        }
        if !(self.guard > 0.0) || self.sensor_noise < 0.0 || self.payload <= -self.model.masses[1] {
            return bad("guard, sensor_noise or payload out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// RMS of the output error norm `|y|` over dynamics steps.
    pub tracking_rms: f64,
    /// Mean `|u_k - u_(k-1)|_1` over control updates.
    pub torque_chatter: f64,
    /// Fraction of control updates with some torque on its bound.
    pub saturation_frac: f64,
    /// Mean of `max(0, V' + (gamma/eps) V)` over dynamics steps.
    pub vdot_violation: f64,
    pub failed: bool,
}

impl EpisodeMetrics {
    /// Worst-case metrics reported for an episode that left the guard region.
    pub fn failure(guard: f64) -> Self {
        Self {
            tracking_rms: guard,
            torque_chatter: guard,
            saturation_frac: 1.0,
            vdot_violation: guard,
            failed: true,
        }
    }
}

fn saturated(u: &DVector<f64>, bounds: &TorqueBox) -> bool {
    u.iter().zip(bounds.lower.iter().zip(bounds.upper.iter())).any(|(&x, (&lo, &hi))| {
        let tol = |b: f64| 1e-9 * b.abs().max(1.0);
        (lo.is_finite() && x - lo <= tol(lo)) || (hi.is_finite() && hi - x <= tol(hi))
    })
}

/// Runs the arm under the chosen CLF-QP for `duration` seconds. By default
/// the QP is re-solved at every integrator stage, so the episode integrates
/// the continuous-time closed loop; sensor noise is drawn once per step.
/// Chatter and saturation are measured on the torque at the start of each
/// control update.
pub fn simulate_episode(
    gains: &ClfGains,
    cfg: &PlantConfig,
    duration: f64,
    controller: Controller,
) -> Result<EpisodeMetrics, PlantError> {
    cfg.validate()?;
    if gains.outputs() != 2 {
        return Err(PlantError::Dimension(format!("arm has 2 outputs, gains have {}", gains.outputs())));
    }
    let gains = match cfg.torque_limit {
        Some(limit) => gains.clone().with_torque_limit(limit),
        None => gains.clone(),
    };
    let cert = gains.certificate()?;
    let bounds = gains.torque_box();
    let plant = cfg.true_arm();
    let period = cfg.reference.period;
    let noise = Normal::new(0.0, cfg.sensor_noise).map_err(|e| PlantError::InvalidGains(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let control = |s: &PlantState, offset: &[f64; 4]| -> Result<Vector2<f64>, PlantError> {
        let mut measured = *s;
        measured.q += Vector2::new(offset[0], offset[1]);
        measured.qd += Vector2::new(offset[2], offset[3]);
        let od = output_dynamics(&measured, &cfg.model, &cfg.reference, &Vector2::zeros())?;
        let problem = ControlProblem::new(&od.eta, od.lf2y, od.decoupling, &cert);
        let u = controller.torque(&problem, &cert, &gains, &bounds)?;
        Ok(Vector2::new(u[0], u[1]))
    };

    let steps = (duration / cfg.dt).round() as usize;
    let mut state = PlantState::from_outputs(&cfg.reference, 0.0, Vector2::from(cfg.initial_error), Vector2::zeros());
    let mut held = Vector2::zeros();
    let mut prev_u: Option<Vector2<f64>> = None;
    let (mut sq_err, mut violation, mut chatter) = (0.0, 0.0, 0.0);
    let (mut updates, mut saturations) = (0usize, 0usize);

    for k in 0..steps {
        let mut offset = [0.0; 4];
        if cfg.sensor_noise > 0.0 {
            offset.iter_mut().for_each(|x| *x = noise.sample(&mut rng));
        }
        let update = !cfg.zero_order_hold || k % cfg.control_every == 0;
        let u = if update { control(&state, &offset)? } else { held };
        if update {
            if let Some(prev) = prev_u {
                chatter += (u - prev).abs().sum();
            }
            saturations += saturated(&DVector::from_column_slice(u.as_slice()), &bounds) as usize;
            updates += 1;
            prev_u = Some(u);
            held = u;
        }

        let od = output_dynamics(&state, &plant, &cfg.reference, &u)?;
        sq_err += od.eta.rows(0, 2).norm_squared();
        let v = clf_value(&od.eta, &cert);
        let vdot = 2.0 * od.eta.dot(&(&cert.p_eps * &od.eta_dot));
        violation += (vdot + cert.rate() * v).max(0.0);

        let next = if cfg.zero_order_hold {
            rk4_step(&plant, &state, cfg.dt, period, |_| Ok(held))
        } else {
            rk4_step(&plant, &state, cfg.dt, period, |s| control(s, &offset))
        };
        state = match next {
            Ok(next) => next,
            Err(_) => return Ok(EpisodeMetrics::failure(cfg.guard)),
        };
        if !state.is_finite() || state.norm() > cfg.guard {
            return Ok(EpisodeMetrics::failure(cfg.guard));
        }
    }

    let steps = steps.max(1) as f64;
    Ok(EpisodeMetrics {
        tracking_rms: (sq_err / steps).sqrt(),
        torque_chatter: chatter / updates.saturating_sub(1).max(1) as f64,
        saturation_frac: saturations as f64 / updates.max(1) as f64,
        vdot_violation: violation / steps,
        failed: false,
    })
}

/// Integrates the output system `eta' = F eta + G u` itself (`lf2y = 0`,
/// identity decoupling) with the controller evaluated inside every RK4
/// stage. Returns `V` at `t = 0, dt, 2 dt, ...`.
pub fn linear_output_rollout(
    gains: &ClfGains,
    eta0: &DVector<f64>,
    duration: f64,
    dt: f64,
    controller: Controller,
) -> Result<Vec<f64>, PlantError> {
    let cert = gains.certificate()?;
    let p = gains.outputs();
    if eta0.len() != 2 * p {
        return Err(PlantError::Dimension(format!("eta has {} entries for {p} outputs", eta0.len())));
    }
    let (f, g) = (drift_matrix(p), input_matrix(p));
    let bounds = gains.torque_box();
    let field = |eta: &DVector<f64>| -> Result<DVector<f64>, PlantError> {
        let problem = ControlProblem::new(eta, DVector::zeros(p), nalgebra::DMatrix::identity(p, p), &cert);
        let u = controller.torque(&problem, &cert, gains, &bounds)?;
        Ok(&f * eta + &g * u)
    };
    let steps = (duration / dt).round() as usize;
    let mut eta = eta0.clone();
    let mut values = Vec::with_capacity(steps + 1);
    values.push(clf_value(&eta, &cert));
    for _ in 0..steps {
        let k1 = field(&eta)?;
        let k2 = field(&(&eta + &k1 * (0.5 * dt)))?;
        let k3 = field(&(&eta + &k2 * (0.5 * dt)))?;
        let k4 = field(&(&eta + &k3 * dt))?;
        eta += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        values.push(clf_value(&eta, &cert));
    }
    Ok(values)
}

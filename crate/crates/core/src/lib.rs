//! Preference-based Bayesian optimization of CLF-QP controller gains.

pub mod acquisition;
pub mod action_space;
pub mod clf_plant;
pub mod preference_gp;
pub mod synthetic_oracle;
pub mod session;

//! Simulated operator: utility is the negative normalized distance to a hidden
//! optimum, and feedback is corrupted with a configurable probability.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{Action, ActionGrid};
use crate::preference_gp::{LikelihoodConfig, OrdinalRecord, PreferenceRecord};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("correct-feedback probability {0} must lie in (0.5, 1]")]
    InvalidProbability(f64),
    #[error("hidden optimum is not a point of the grid")]
    OffGrid,
    #[error("utility scale must be positive")]
    InvalidScale,
}

/// Grids up to this size get an exact median distance; larger ones are sampled.
const EXACT_MEDIAN_LIMIT: u64 = 100_000;
const MEDIAN_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub hidden_optimum: Action,
    pub correct_prob: f64,
    pub utility_scale: f64,
    /// Median normalized distance from the optimum over the grid; shifts
    /// utilities so that a typical action sits in the middle ordinal band.
    pub median_distance: f64,
}

fn distance(grid: &ActionGrid, a: &[f64], b: &Action) -> f64 {
    a.iter()
        .zip(grid.normalize(b))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl OracleConfig {
    /// Calibrates the utility scale so the median distance maps to utility 0
    /// ("neutral") and a distance of one tenth of the largest distance maps to
    /// the upper threshold `b = 1`.
    pub fn calibrated(grid: &ActionGrid, hidden_optimum: Action, correct_prob: f64) -> Result<Self, OracleError> {
        if !grid.contains(&hidden_optimum) {
            return Err(OracleError::OffGrid);
        }
        let star = grid.normalize(&hidden_optimum);
        let mut dists: Vec<f64> = if grid.cardinality() <= EXACT_MEDIAN_LIMIT {
            grid.iter().map(|a| distance(grid, &star, &a)).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(hidden_optimum.id.0);
            (0..MEDIAN_SAMPLES)
                .map(|_| distance(grid, &star, &grid.random_action(&mut rng)))
                .collect()
        };
        dists.sort_by(f64::total_cmp);
        let n = dists.len();
        let median = if n % 2 == 1 {
            dists[n / 2]
        } else {
            0.5 * (dists[n / 2 - 1] + dists[n / 2])
        };
        let max = star
            .iter()
            .map(|u| u.max(1.0 - u).powi(2))
            .sum::<f64>()
            .sqrt();
        let span = median - 0.1 * max;
        let utility_scale = if span > 0.0 { 1.0 / span } else { 1.0 / max };
        let cfg = Self {
            hidden_optimum,
            correct_prob,
            utility_scale,
            median_distance: median,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.correct_prob > 0.5 && self.correct_prob <= 1.0) {
            return Err(OracleError::InvalidProbability(self.correct_prob));
        }
        if !(self.utility_scale > 0.0 && self.utility_scale.is_finite()) {
            return Err(OracleError::InvalidScale);
        }
        Ok(())
    }

    /// Normalized distance between `a` and the hidden optimum.
    pub fn distance(&self, grid: &ActionGrid, a: &Action) -> f64 {
        distance(grid, &grid.normalize(&self.hidden_optimum), a)
    }
}

/// Negative scaled distance to the hidden optimum; maximal (zero) at the optimum.
pub fn true_utility(grid: &ActionGrid, a: &Action, cfg: &OracleConfig) -> f64 {
    -cfg.utility_scale * cfg.distance(grid, a)
}

/// Utility on the ordinal threshold scale.
pub fn calibrated_utility(grid: &ActionGrid, a: &Action, cfg: &OracleConfig) -> f64 {
    cfg.utility_scale * (cfg.median_distance - cfg.distance(grid, a))
}

pub fn synthetic_preference_with<R: Rng + ?Sized>(
    grid: &ActionGrid,
    a_new: &Action,
    a_old: &Action,
    cfg: &OracleConfig,
    rng: &mut R,
) -> PreferenceRecord {
    let u_new = true_utility(grid, a_new, cfg);
    let u_old = true_utility(grid, a_old, cfg);
    let new_is_better = if u_new == u_old {
        rng.gen_bool(0.5)
    } else {
        let truth = u_new > u_old;
        if rng.gen_bool(cfg.correct_prob) {
            truth
        } else {
            !truth
        }
    };
    if new_is_better {
        PreferenceRecord { winner: a_new.id, loser: a_old.id }
    } else {
        PreferenceRecord { winner: a_old.id, loser: a_new.id }
    }
}

pub fn synthetic_preference(
    grid: &ActionGrid,
    a_new: &Action,
    a_old: &Action,
    cfg: &OracleConfig,
    seed: u64,
) -> PreferenceRecord {
    synthetic_preference_with(grid, a_new, a_old, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Noise-free label from the calibrated utility; with probability
/// `1 - correct_prob` it moves one category: extremes move inward, interior
/// labels move up or down with equal probability.
pub fn synthetic_ordinal_with<R: Rng + ?Sized>(
    grid: &ActionGrid,
    a: &Action,
    cfg: &OracleConfig,
    likelihood: &LikelihoodConfig,
    rng: &mut R,
) -> OrdinalRecord {
    let n = likelihood.categories();
    let clean = likelihood.category_of(calibrated_utility(grid, a, cfg));
    let label = if n < 2 || rng.gen_bool(cfg.correct_prob) {
        clean
    } else if clean == 1 {
        2
    } else if clean == n {
        n - 1
    } else if rng.gen_bool(0.5) {
        clean + 1
    } else {
        clean - 1
    };
    OrdinalRecord { action: a.id, label }
}

pub fn synthetic_ordinal(
    grid: &ActionGrid,
    a: &Action,
    cfg: &OracleConfig,
    likelihood: &LikelihoodConfig,
    seed: u64,
) -> OrdinalRecord {
    synthetic_ordinal_with(grid, a, cfg, likelihood, &mut ChaCha8Rng::seed_from_u64(seed))
}

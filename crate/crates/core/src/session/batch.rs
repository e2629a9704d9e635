//! Simulated tuning runs against the synthetic oracle, averaged into
//! error-per-iteration curves.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, rng_for, FeedbackMode, FeedbackSource, Selection, Session, SessionConfig, SessionError, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchMode {
    #[serde(rename = "pref")]
    Preferences,
    #[serde(rename = "pref+ord")]
    PreferencesOrdinals,
    /// Uniformly random actions, otherwise the preference-and-ordinal loop.
    #[serde(rename = "random")]
    Random,
}

impl BatchMode {
    pub const ALL: [BatchMode; 3] = [BatchMode::Preferences, BatchMode::PreferencesOrdinals, BatchMode::Random];

    pub fn name(self) -> &'static str {
        match self {
            BatchMode::Preferences => "pref",
            BatchMode::PreferencesOrdinals => "pref+ord",
            BatchMode::Random => "random",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    fn apply(self, cfg: &mut SessionConfig) {
        let (mode, selection) = match self {
            BatchMode::Preferences => (FeedbackMode::Preferences, Selection::Thompson),
            BatchMode::PreferencesOrdinals => (FeedbackMode::PreferencesOrdinals, Selection::Thompson),
            BatchMode::Random => (FeedbackMode::PreferencesOrdinals, Selection::Random),
        };
        cfg.mode = mode;
        cfg.selection = selection;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mode: String,
    pub mean_error: f64,
    pub stderr: f64,
}

/// Normalized distance from the believed best to the hidden optimum after
/// each of `config.budget` iterations of one synthetic session.
pub fn run_error_curve(config: SessionConfig) -> Result<Vec<f64>, SessionError> {
    let mut session = Session::start(config)?;
    let oracle = session.oracle().cloned().ok_or(SessionError::WrongSource("human"))?;
    let mut errors = Vec::with_capacity(session.config().budget);
    while !session.is_complete() {
        let event = session.generated_feedback()?;
        session.submit(event)?;
        let (best, _) = session.believed_best().ok_or(SessionError::Config("no visited action".into()))?;
        errors.push(oracle.distance(session.grid(), &best));
    }
    Ok(errors)
}

/// Runs `runs` sessions of `iterations` steps per mode. Run `r` uses the same
/// hidden optimum in every mode; all seeds derive from `base.seed`.
pub fn run_batch(
    base: &SessionConfig,
    modes: &[BatchMode],
    runs: usize,
    iterations: usize,
) -> Result<Vec<CurvePoint>, SessionError> {
    let grid = base.build_grid()?;
    let jobs: Vec<(BatchMode, usize)> = modes.iter().flat_map(|&m| (0..runs).map(move |r| (m, r))).collect();
    let curves: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(mode, r)| {
            let mut cfg = base.clone();
            cfg.source = FeedbackSource::Synthetic;
            cfg.budget = iterations;
            cfg.seed = derive_seed(base.seed, Stream::Run as u64, r as u64);
            if base.oracle.optimum.is_none() {
                let optimum = grid.random_action(&mut rng_for(base.seed, Stream::Optimum, r as u64));
                cfg.oracle.optimum = Some(optimum.indices);
            }
            mode.apply(&mut cfg);
            run_error_curve(cfg)
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::with_capacity(modes.len() * iterations);
    for (k, &mode) in modes.iter().enumerate() {
        let block = &curves[k * runs..(k + 1) * runs];
        for it in 0..iterations {
            let xs: Vec<f64> = block.iter().map(|c| c[it]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let stderr = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            points.push(CurvePoint {
                iteration: it + 1,
                mode: mode.name().to_string(),
                mean_error: mean,
                stderr,
            });
        }
    }
    Ok(points)
}

/// CSV with columns `iteration,mode,mean_error,stderr`.
pub fn write_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<(), SessionError> {
    let mut writer = csv::Writer::from_writer(out);
    for p in points {
        writer
            .serialize(p)
            .map_err(|e| SessionError::Io(std::io::Error::other(e.to_string())))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::{ActionGrid, DimensionSpec};

    fn small() -> SessionConfig {
        let grid = ActionGrid::new((0..3).map(|d| DimensionSpec::new(format!("g{d}"), 0.0, 1.0, 5)).collect()).unwrap();
        SessionConfig::new(&grid, 1, 5)
    }

    #[test]
    fn batch_is_deterministic_and_shaped() {
        let a = run_batch(&small(), &BatchMode::ALL, 3, 6).unwrap();
        let b = run_batch(&small(), &BatchMode::ALL, 3, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 18);
        assert_eq!(a[0].iteration, 1);
        assert_eq!(a[17].mode, "random");
        let mut csv = Vec::new();
        write_csv(&a, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,mode,mean_error,stderr\n1,pref,"));
        assert_eq!(text.lines().count(), 19);
    }

    #[test]
    fn starting_at_the_optimum_gives_zero_error() {
        let mut cfg = small();
        cfg.source = FeedbackSource::Synthetic;
        cfg.budget = 1;
        let first = Session::start(cfg.clone()).unwrap().state().current.clone();
        cfg.oracle.optimum = Some(first.indices);
        assert_eq!(run_error_curve(cfg).unwrap(), vec![0.0]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BatchMode::ALL {
            assert_eq!(BatchMode::parse(m.name()), Some(m));
        }
        assert_eq!(BatchMode::parse("both"), None);
    }
}

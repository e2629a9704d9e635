//! The tuning loop: deploy an action, take feedback, refit the posterior,
//! Thompson-sample the next action. State is a fold over feedback events, and
//! an optional JSON-lines log makes it durable.

mod autorater;
mod batch;
mod config;
mod log;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use autorater::{plant_autorater_feedback, AutoraterWeights};
pub use batch::{run_batch, run_error_curve, write_csv, BatchMode, CurvePoint};
pub use config::{FeedbackMode, FeedbackSource, GridSource, KernelSettings, OracleSettings, Selection, SessionConfig};
pub use log::{now_millis, LogRecord, RecordKind, SessionLog};

use crate::acquisition::{believed_best, next_action_with, refresh_candidates, CandidateSet};
use crate::action_space::{Action, ActionGrid, ActionId, GridError};
use crate::clf_plant::{gains_from_action, simulate_episode, EpisodeMetrics, GainProfile, PlantError};
use crate::preference_gp::{
    fit_with_prior, prior_covariance, FeedbackDataset, GpError, KernelConfig, NewtonOptions, OrdinalRecord,
    PosteriorModel, PreferenceRecord,
};
use crate::synthetic_oracle::{synthetic_ordinal, synthetic_preference, OracleConfig, OracleError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("session log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("session already used its budget of {0} iterations")]
    Completed(usize),
    #[error("malformed feedback: {0}")]
    Malformed(String),
    #[error("feedback is for iteration {got} but the session is at iteration {expected}")]
    StaleIteration { expected: usize, got: usize },
    #[error("{0} feedback is generated by the session, not submitted")]
    WrongSource(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    /// The action just deployed beats the one before it.
    New,
    Old,
    Skip,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackEvent {
    pub preference: Option<Preference>,
    /// 1 = very bad, 2 = neutral, 3 = very good (with the default thresholds).
    pub ordinal: Option<usize>,
    /// Milliseconds since the Unix epoch; filled in on submission when zero.
    pub timestamp: u64,
    pub note: String,
    /// Completed-iteration count the client saw. A mismatch is rejected, so a
    /// resent request cannot be applied twice.
    pub iteration: Option<usize>,
}

impl FeedbackEvent {
    pub fn skip() -> Self {
        Self {
            preference: Some(Preference::Skip),
            ..Self::default()
        }
    }

    pub fn is_skip(&self) -> bool {
        self.preference == Some(Preference::Skip) && self.ordinal.is_none()
    }

    fn validate(&self, categories: usize) -> Result<(), SessionError> {
        if self.preference.is_none() && self.ordinal.is_none() {
            return Err(SessionError::Malformed("needs a preference, an ordinal label, or skip".into()));
        }
        if let Some(label) = self.ordinal {
            if label == 0 || label > categories {
                return Err(SessionError::Malformed(format!("ordinal label {label} outside 1..={categories}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub best: ActionId,
    pub best_mean: f64,
    pub preference: Option<Preference>,
    pub ordinal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    /// Completed iterations, i.e. feedback events applied.
    pub iteration: usize,
    pub candidates: CandidateSet,
    pub data: FeedbackDataset,
    pub previous: Option<Action>,
    /// The deployed action awaiting feedback (the last one once complete).
    pub current: Action,
    pub posterior: PosteriorModel,
    pub history: Vec<HistoryEntry>,
    pub current_metrics: Option<EpisodeMetrics>,
    pub previous_metrics: Option<EpisodeMetrics>,
}

/// Independent random streams derived from the session seed.
#[derive(Clone, Copy)]
enum Stream {
    FirstAction = 1,
    Line,
    Thompson,
    RandomAction,
    Optimum,
    OraclePreference,
    OracleOrdinal,
    Autorater,
    SensorNoise,
    Run,
}

/// SplitMix64 over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSummary {
    pub action: Action,
    pub mean: f64,
    pub std_dev: f64,
}

/// Everything a client needs to render the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub iteration: usize,
    pub budget: usize,
    pub complete: bool,
    pub mode: FeedbackMode,
    pub source: FeedbackSource,
    pub dimensions: Vec<String>,
    pub current: Action,
    pub previous: Option<Action>,
    pub current_metrics: Option<EpisodeMetrics>,
    pub previous_metrics: Option<EpisodeMetrics>,
    pub believed_best: Option<ActionSummary>,
    pub history: Vec<HistoryEntry>,
}

pub struct Session {
    config: SessionConfig,
    grid: ActionGrid,
    kernel: KernelConfig,
    oracle: Option<OracleConfig>,
    state: SessionState,
    log: Option<SessionLog>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("iteration", &self.state.iteration)
            .field("budget", &self.config.budget)
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Iteration 0: the first action is uniform on the grid; the posterior is
    /// the prior over it and a random line through it.
    pub fn start(config: SessionConfig) -> Result<Self, SessionError> {
        let grid = config.build_grid()?;
        config.validate(&grid)?;
        let kernel = config.kernel.for_dims(grid.num_dims());
        let oracle = match config.source {
            FeedbackSource::Synthetic => {
                let optimum = match &config.oracle.optimum {
                    Some(indices) => grid.action_from_indices(indices)?,
                    None => grid.random_action(&mut rng_for(config.seed, Stream::Optimum, 0)),
                };
                Some(OracleConfig::calibrated(&grid, optimum, config.oracle.correct_prob)?)
            }
            _ => None,
        };
        let first = grid.random_action(&mut rng_for(config.seed, Stream::FirstAction, 0));
        let mut candidates = CandidateSet::default();
        candidates.visit(first.clone());
        let candidates = refresh_candidates(&candidates, &grid, &first, derive_seed(config.seed, Stream::Line as u64, 0));
        let union = candidates.union();
        let posterior = PosteriorModel::from_prior(union.iter().map(|a| a.id).collect(), prior_covariance(&grid, &union, &kernel)?);
        let mut session = Self {
            state: SessionState {
                iteration: 0,
                candidates,
                data: FeedbackDataset::default(),
                previous: None,
                current: first.clone(),
                posterior,
                history: Vec::new(),
                current_metrics: None,
                previous_metrics: None,
            },
            config,
            grid,
            kernel,
            oracle,
            log: None,
        };
        session.state.current_metrics = session.episode(&first, 0)?;
        Ok(session)
    }

    /// Starts a session and records it in a new log at `path`.
    pub fn start_logged(config: SessionConfig, path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let mut session = Self::start(config)?;
        let mut log = SessionLog::create(path)?;
        let payload = serde_json::to_value(&session.config).map_err(|e| SessionError::Config(e.to_string()))?;
        log.append(&LogRecord::new(RecordKind::Start, payload, now_millis()))?;
        session.log = Some(log);
        session.log_episode()?;
        Ok(session)
    }

    /// Rebuilds a session by replaying its log and keeps appending to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let (log, records) = SessionLog::open(path)?;
        let mut records = records.into_iter().enumerate();
        let config: SessionConfig = match records.next() {
            Some((_, r)) if r.kind == RecordKind::Start => {
                serde_json::from_value(r.payload).map_err(|e| SessionError::Log { line: 1, message: e.to_string() })?
            }
            _ => {
                return Err(SessionError::Log {
                    line: 1,
                    message: "log does not begin with a start record".into(),
                })
            }
        };
        let mut session = Self::start(config)?;
        for (i, record) in records {
            if record.kind != RecordKind::Feedback {
                continue;
            }
            let event: FeedbackEvent = serde_json::from_value(record.payload)
                .map_err(|e| SessionError::Log { line: i + 1, message: e.to_string() })?;
            session.state = session.advance(&event)?;
        }
        session.log = Some(log);
        Ok(session)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn grid(&self) -> &ActionGrid {
        &self.grid
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn oracle(&self) -> Option<&OracleConfig> {
        self.oracle.as_ref()
    }

    pub fn is_complete(&self) -> bool {
        self.state.iteration >= self.config.budget
    }

    /// Believed-best visited action and its posterior mean.
    pub fn believed_best(&self) -> Option<(Action, f64)> {
        let (id, mean) = believed_best(&self.state.posterior, &self.state.candidates.visited_ids())?;
        Some((self.state.candidates.find(id)?.clone(), mean))
    }

    /// Applies one event, persists it, and moves to the next action.
    pub fn submit(&mut self, mut event: FeedbackEvent) -> Result<&SessionState, SessionError> {
        if event.timestamp == 0 {
            event.timestamp = now_millis();
        }
        let next = self.advance(&event)?;
        if let Some(log) = &mut self.log {
            let payload = serde_json::to_value(&event).map_err(|e| SessionError::Malformed(e.to_string()))?;
            log.append(&LogRecord::new(RecordKind::Feedback, payload, now_millis()))?;
        }
        self.state = next;
        if !self.is_complete() {
            self.log_episode()?;
        }
        Ok(&self.state)
    }

    /// Feedback the configured synthetic oracle or autorater gives for the
    /// current action.
    pub fn generated_feedback(&self) -> Result<FeedbackEvent, SessionError> {
        let st = &self.state;
        let i = st.iteration as u64;
        match self.config.source {
            FeedbackSource::Human => Err(SessionError::WrongSource("human")),
            FeedbackSource::Synthetic => {
                let oracle = self.oracle.as_ref().ok_or(SessionError::WrongSource("human"))?;
                let preference = st.previous.as_ref().map(|prev| {
                    let seed = derive_seed(self.config.seed, Stream::OraclePreference as u64, i);
                    let record = synthetic_preference(&self.grid, &st.current, prev, oracle, seed);
                    if record.winner == st.current.id {
                        Preference::New
                    } else {
                        Preference::Old
                    }
                });
                let ordinal = (self.config.mode == FeedbackMode::PreferencesOrdinals).then(|| {
                    let seed = derive_seed(self.config.seed, Stream::OracleOrdinal as u64, i);
                    synthetic_ordinal(&self.grid, &st.current, oracle, &self.config.likelihood, seed).label
                });
                Ok(FeedbackEvent {
                    preference: preference.or(Some(Preference::Skip)),
                    ordinal,
                    note: "synthetic".into(),
                    iteration: Some(st.iteration),
                    ..FeedbackEvent::default()
                })
            }
            FeedbackSource::Autorater => {
                let new = st.current_metrics.as_ref().ok_or_else(|| SessionError::Config("no episode metrics".into()))?;
                let mut rng = rng_for(self.config.seed, Stream::Autorater, i);
                let mut event = plant_autorater_feedback(new, st.previous_metrics.as_ref(), &self.config.autorater, &mut rng);
                if self.config.mode == FeedbackMode::Preferences {
                    event.ordinal = None;
                }
                if event.preference.is_none() && event.ordinal.is_none() {
                    event.preference = Some(Preference::Skip);
                }
                event.iteration = Some(st.iteration);
                Ok(event)
            }
        }
    }

    /// Runs generated feedback until the budget is used.
    pub fn run_to_completion(&mut self) -> Result<(), SessionError> {
        while !self.is_complete() {
            let event = self.generated_feedback()?;
            self.submit(event)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> SessionSummary {
        let st = &self.state;
        let believed_best = self.believed_best().map(|(action, mean)| {
            let std_dev = st.posterior.position(action.id).map(|i| st.posterior.std_dev()[i]).unwrap_or(0.0);
            ActionSummary { action, mean, std_dev }
        });
        SessionSummary {
            iteration: st.iteration,
            budget: self.config.budget,
            complete: self.is_complete(),
            mode: self.config.mode,
            source: self.config.source,
            dimensions: self.grid.dims().iter().map(|d| d.name.clone()).collect(),
            current: st.current.clone(),
            previous: st.previous.clone(),
            current_metrics: st.current_metrics,
            previous_metrics: st.previous_metrics,
            believed_best,
            history: st.history.clone(),
        }
    }

    /// Posterior mean and standard deviation of every visited action.
    pub fn posterior_summary(&self) -> Vec<ActionSummary> {
        let st = &self.state;
        let std_dev = st.posterior.std_dev();
        st.candidates
            .visited()
            .iter()
            .filter_map(|a| {
                let i = st.posterior.position(a.id)?;
                Some(ActionSummary {
                    action: a.clone(),
                    mean: st.posterior.mean[i],
                    std_dev: std_dev[i],
                })
            })
            .collect()
    }

    fn fit(&self, actions: &[Action], data: &FeedbackDataset, warm: &PosteriorModel) -> Result<PosteriorModel, SessionError> {
        let ids: Vec<ActionId> = actions.iter().map(|a| a.id).collect();
        let sigma = prior_covariance(&self.grid, actions, &self.kernel)?;
        let warm: HashMap<ActionId, f64> = warm.action_ids.iter().copied().zip(warm.mean.iter().copied()).collect();
        Ok(fit_with_prior(&ids, sigma, data, &self.config.likelihood, NewtonOptions::default(), Some(&warm))?)
    }

    fn episode(&self, action: &Action, iteration: usize) -> Result<Option<EpisodeMetrics>, SessionError> {
        if self.config.profile != Some(GainProfile::Toy) {
            return Ok(None);
        }
        let gains = gains_from_action(action, GainProfile::Toy)?;
        let mut plant = self.config.plant.clone();
        plant.noise_seed = derive_seed(self.config.seed ^ plant.noise_seed, Stream::SensorNoise as u64, iteration as u64);
        Ok(Some(simulate_episode(&gains, &plant, self.config.episode_duration, self.config.controller)?))
    }

    fn log_episode(&mut self) -> Result<(), SessionError> {
        let (Some(log), Some(metrics)) = (&mut self.log, &self.state.current_metrics) else {
            return Ok(());
        };
        let payload = serde_json::json!({
            "iteration": self.state.iteration,
            "action": self.state.current.id,
            "metrics": metrics,
        });
        log.append(&LogRecord::new(RecordKind::Episode, payload, now_millis()))
    }

    /// The pure transition: the state after `event`, without touching the log.
    fn advance(&self, event: &FeedbackEvent) -> Result<SessionState, SessionError> {
        let st = &self.state;
        if self.is_complete() {
            return Err(SessionError::Completed(self.config.budget));
        }
        event.validate(self.config.likelihood.categories())?;
        if let Some(seen) = event.iteration {
            if seen != st.iteration {
                return Err(SessionError::StaleIteration {
                    expected: st.iteration,
                    got: seen,
                });
            }
        }

        let mut next = st.clone();
        if let Some(prev) = st.previous.as_ref().filter(|p| p.id != st.current.id) {
            match event.preference {
                Some(Preference::New) => next.data.preferences.push(PreferenceRecord {
                    winner: st.current.id,
                    loser: prev.id,
                }),
                Some(Preference::Old) => next.data.preferences.push(PreferenceRecord {
                    winner: prev.id,
                    loser: st.current.id,
                }),
                _ => {}
            }
        }
        if let (Some(label), FeedbackMode::PreferencesOrdinals) = (event.ordinal, self.config.mode) {
            next.data.ordinals.push(OrdinalRecord {
                action: st.current.id,
                label,
            });
        }
        next.iteration += 1;
        let i = next.iteration as u64;
        let seed = self.config.seed;

        // The line goes through the believed best of the visited-only fit;
        // unobserved line points do not move the mode at visited actions.
        let visited = next.candidates.visited().to_vec();
        let visited_ids = next.candidates.visited_ids();
        let visited_fit = self.fit(&visited, &next.data, &st.posterior)?;
        let (anchor_id, _) = believed_best(&visited_fit, &visited_ids).ok_or(GpError::Empty)?;
        let anchor = self.grid.action(anchor_id)?;
        next.candidates = refresh_candidates(&next.candidates, &self.grid, &anchor, derive_seed(seed, Stream::Line as u64, i));
        next.posterior = self.fit(&next.candidates.union(), &next.data, &visited_fit)?;
        let (best, best_mean) = believed_best(&next.posterior, &visited_ids).ok_or(GpError::Empty)?;
        next.history.push(HistoryEntry {
            iteration: next.iteration,
            best,
            best_mean,
            preference: event.preference,
            ordinal: event.ordinal,
        });

        if next.iteration < self.config.budget {
            let action = match self.config.selection {
                Selection::Thompson => {
                    let line: Vec<ActionId> = next.candidates.line().iter().map(|a| a.id).collect();
                    let restrict = self.config.line_only.then_some(line.as_slice());
                    let id = next_action_with(&next.posterior, restrict, &mut rng_for(seed, Stream::Thompson, i))?;
                    self.grid.action(id)?
                }
                Selection::Random => self.grid.random_action(&mut rng_for(seed, Stream::RandomAction, i)),
            };
            next.previous_metrics = next.current_metrics.take();
            next.current_metrics = self.episode(&action, next.iteration)?;
            next.previous = Some(std::mem::replace(&mut next.current, action.clone()));
            next.candidates.visit(action);
        }
        Ok(next)
    }
}

fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream as u64, index))
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::autorater::AutoraterWeights;
use super::SessionError;
use crate::action_space::{ActionGrid, DimensionSpec};
use crate::clf_plant::{Controller, GainProfile, PlantConfig};
use crate::preference_gp::{KernelConfig, LikelihoodConfig};

/// Either a path to a `.grid` file or the dimensions themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSource {
    File(PathBuf),
    Inline(Vec<DimensionSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FeedbackMode {
    #[serde(rename = "pref")]
    Preferences,
    #[default]
    #[serde(rename = "pref+ord")]
    PreferencesOrdinals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    #[default]
    Human,
    Synthetic,
    Autorater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Thompson,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSettings {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            lengthscale: KernelConfig::DEFAULT_LENGTHSCALE,
            signal_variance: 1.0,
            jitter: 1e-6,
        }
    }
}

impl KernelSettings {
    pub fn for_dims(&self, dims: usize) -> KernelConfig {
        KernelConfig {
            signal_variance: self.signal_variance,
            lengthscales: vec![self.lengthscale; dims],
            jitter: self.jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub correct_prob: f64,
    /// Grid indices of the hidden optimum; drawn from the seed when absent.
    pub optimum: Option<Vec<usize>>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            correct_prob: 1.0,
            optimum: None,
        }
    }
}

fn default_duration() -> f64 {
    2.0
}

fn default_controller() -> Controller {
    Controller::Plus
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub grid: GridSource,
    /// Maps actions to controller gains; required to run plant episodes.
    #[serde(default)]
    pub profile: Option<GainProfile>,
    #[serde(default)]
    pub kernel: KernelSettings,
    #[serde(default)]
    pub likelihood: LikelihoodConfig,
    #[serde(default)]
    pub mode: FeedbackMode,
    #[serde(default)]
    pub source: FeedbackSource,
    #[serde(default)]
    pub selection: Selection,
    /// Thompson draws only over the current line instead of visited plus line.
    #[serde(default)]
    pub line_only: bool,
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub episode_duration: f64,
    #[serde(default = "default_controller")]
    pub controller: Controller,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub autorater: AutoraterWeights,
}

impl SessionConfig {
    pub fn new(grid: &ActionGrid, budget: usize, seed: u64) -> Self {
        Self {
            grid: GridSource::Inline(grid.dims().to_vec()),
            profile: None,
            kernel: KernelSettings::default(),
            likelihood: LikelihoodConfig::default(),
            mode: FeedbackMode::default(),
            source: FeedbackSource::default(),
            selection: Selection::default(),
            line_only: false,
            budget,
            seed,
            episode_duration: default_duration(),
            controller: default_controller(),
            plant: PlantConfig::default(),
            oracle: OracleSettings::default(),
            autorater: AutoraterWeights::default(),
        }
    }

    /// Reads a TOML (or, for `.json` files, JSON) config. A grid given as a
    /// path is read relative to the config file and inlined.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SessionError::Config(format!("{}: {e}", path.display())))?;
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| SessionError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| SessionError::Config(e.to_string()))?
        };
        config.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    /// Inlines a file grid, reading it relative to `base`.
    pub fn resolve(mut self, base: &Path) -> Result<Self, SessionError> {
        if let GridSource::File(file) = &self.grid {
            let grid = ActionGrid::load(base.join(file))?;
            self.grid = GridSource::Inline(grid.dims().to_vec());
        }
        Ok(self)
    }

    pub fn build_grid(&self) -> Result<ActionGrid, SessionError> {
        match &self.grid {
            GridSource::Inline(dims) => Ok(ActionGrid::new(dims.clone())?),
            GridSource::File(file) => Ok(ActionGrid::load(file)?),
        }
    }

    pub fn validate(&self, grid: &ActionGrid) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::Config(m));
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        self.kernel.for_dims(grid.num_dims()).validate()?;
        self.likelihood.validate()?;
        if !(self.episode_duration > 0.0 && self.episode_duration.is_finite()) {
            return bad(format!("episode_duration {} must be positive", self.episode_duration));
        }
        if !(0.5..=1.0).contains(&self.oracle.correct_prob) {
            return bad(format!("oracle.correct_prob {} outside [0.5, 1]", self.oracle.correct_prob));
        }
        if let Some(profile) = self.profile {
            if profile.dims() != grid.num_dims() {
                return bad(format!(
                    "{profile:?} profile needs {} dimensions, grid has {}",
                    profile.dims(),
                    grid.num_dims()
                ));
            }
        }
        if self.source == FeedbackSource::Autorater && self.profile != Some(GainProfile::Toy) {
            return bad("autorater feedback needs the toy profile to simulate episodes".into());
        }
        Ok(())
    }
}

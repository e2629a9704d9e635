//! Discretized gain search space.
//!
//! Each tuned gain is a [`DimensionSpec`] with inclusive bounds and a number of
//! evenly spaced grid values. An [`ActionGrid`] is the Cartesian product of its
//! dimensions; an [`Action`] is one point of that product, identified by a
//! mixed-radix [`ActionId`].

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("dimension `{name}`: lower bound {lower} must be below upper bound {upper}")]
    InvalidBounds { name: String, lower: f64, upper: f64 },
    #[error("dimension `{name}`: needs at least 2 grid values, got {count}")]
    TooFewValues { name: String, count: usize },
    #[error("grid must have at least one dimension")]
    Empty,
    #[error("grid cardinality overflows a 64-bit id")]
    TooLarge,
    #[error("expected {expected} indices, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for dimension {dim} with {count} values")]
    IndexOutOfRange { dim: usize, index: usize, count: usize },
    #[error("action id {0} out of range")]
    IdOutOfRange(u64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading grid file: {0}")]
    Io(String),
}

/// One tuned gain: bounds in gain units and the number of grid values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl DimensionSpec {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64, count: usize) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            count,
        }
    }

    fn validate(&self) -> Result<(), GridError> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(GridError::InvalidBounds {
                name: self.name.clone(),
                lower: self.lower,
                upper: self.upper,
            });
        }
        if self.count < 2 {
            return Err(GridError::TooFewValues {
                name: self.name.clone(),
                count: self.count,
            });
        }
        Ok(())
    }

    /// Gain value at grid index `index`.
    pub fn value(&self, index: usize) -> f64 {
        if index + 1 == self.count {
            return self.upper;
        }
        let step = (self.upper - self.lower) / (self.count - 1) as f64;
        self.lower + index as f64 * step
    }

    /// Position of grid index `index` in `[0, 1]`.
    pub fn unit(&self, index: usize) -> f64 {
        index as f64 / (self.count - 1) as f64
    }
}

/// Canonical mixed-radix identifier of a grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u64);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A concrete gain vector on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub id: ActionId,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    dims: Vec<DimensionSpec>,
    cardinality: u64,
}

impl ActionGrid {
    /// Builds a grid from its dimensions, in the order given.
    pub fn new(dims: Vec<DimensionSpec>) -> Result<Self, GridError> {
        if dims.is_empty() {
            return Err(GridError::Empty);
        }
        let mut cardinality: u64 = 1;
        for d in &dims {
            d.validate()?;
            cardinality = cardinality
                .checked_mul(d.count as u64)
                .ok_or(GridError::TooLarge)?;
        }
        Ok(Self { dims, cardinality })
    }

    pub fn dims(&self) -> &[DimensionSpec] {
        &self.dims
    }

    pub fn num_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn cardinality(&self) -> u64 {
        self.cardinality
    }

    pub fn action_from_indices(&self, indices: &[usize]) -> Result<Action, GridError> {
        if indices.len() != self.dims.len() {
            return Err(GridError::DimensionMismatch {
                expected: self.dims.len(),
                got: indices.len(),
            });
        }
        let mut id: u64 = 0;
        let mut values = Vec::with_capacity(indices.len());
        for (dim, (spec, &index)) in self.dims.iter().zip(indices).enumerate() {
            if index >= spec.count {
                return Err(GridError::IndexOutOfRange {
                    dim,
                    index,
                    count: spec.count,
                });
            }
            id = id * spec.count as u64 + index as u64;
            values.push(spec.value(index));
        }
        Ok(Action {
            id: ActionId(id),
            indices: indices.to_vec(),
            values,
        })
    }

    /// Inverse of the mixed-radix encoding: the first dimension is the most
    /// significant digit.
    pub fn decode(&self, id: ActionId) -> Result<Vec<usize>, GridError> {
        if id.0 >= self.cardinality {
            return Err(GridError::IdOutOfRange(id.0));
        }
        let mut rest = id.0;
        let mut indices = vec![0; self.dims.len()];
        for (slot, spec) in indices.iter_mut().zip(&self.dims).rev() {
            *slot = (rest % spec.count as u64) as usize;
            rest /= spec.count as u64;
        }
        Ok(indices)
    }

    pub fn action(&self, id: ActionId) -> Result<Action, GridError> {
        let indices = self.decode(id)?;
        self.action_from_indices(&indices)
    }

    /// Whether `action` is a point of this grid with consistent id and values.
    pub fn contains(&self, action: &Action) -> bool {
        matches!(self.action_from_indices(&action.indices), Ok(a) if a == *action)
    }

    /// Coordinates scaled to `[0, 1]` per dimension by the bounds.
    pub fn normalize(&self, action: &Action) -> Vec<f64> {
        self.dims
            .iter()
            .zip(&action.indices)
            .map(|(d, &i)| d.unit(i))
            .collect()
    }

    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let indices: Vec<usize> = self.dims.iter().map(|d| rng.gen_range(0..d.count)).collect();
        self.action_from_indices(&indices)
            .expect("sampled indices are in range")
    }

    /// Every action, in id order. Only sensible for small grids.
    pub fn iter(&self) -> impl Iterator<Item = Action> + '_ {
        (0..self.cardinality).map(move |id| self.action(ActionId(id)).expect("id in range"))
    }

    /// All grid points on the lattice line `anchor + t * direction`, ordered by
    /// increasing `t`. Zero direction yields just the anchor.
    pub fn line_through(&self, anchor: &Action, direction: &[i64]) -> Vec<Action> {
        assert_eq!(direction.len(), self.dims.len(), "direction length");
        if direction.iter().all(|&s| s == 0) {
            return vec![anchor.clone()];
        }
        let in_range = |t: i64| {
            self.dims
                .iter()
                .zip(&anchor.indices)
                .zip(direction)
                .all(|((d, &i), &s)| {
                    let k = i as i64 + t * s;
                    k >= 0 && k < d.count as i64
                })
        };
        let mut t_min = 0;
        while in_range(t_min - 1) {
            t_min -= 1;
        }
        let mut t_max = 0;
        while in_range(t_max + 1) {
            t_max += 1;
        }
        (t_min..=t_max)
            .map(|t| {
                let idx: Vec<usize> = anchor
                    .indices
                    .iter()
                    .zip(direction)
                    .map(|(&i, &s)| (i as i64 + t * s) as usize)
                    .collect();
                self.action_from_indices(&idx).expect("walk stays on grid")
            })
            .collect()
    }

    /// A random lattice line through `anchor`: half of the time along one
    /// coordinate axis, otherwise along a direction with steps in {-1, 0, 1}.
    pub fn random_line<R: Rng + ?Sized>(&self, anchor: &Action, rng: &mut R) -> Vec<Action> {
        let v = self.dims.len();
        let mut direction = vec![0i64; v];
        if rng.gen_bool(0.5) {
            direction[rng.gen_range(0..v)] = 1;
        } else {
            loop {
                for s in direction.iter_mut() {
                    *s = rng.gen_range(-1..=1);
                }
                if direction.iter().any(|&s| s != 0) {
                    break;
                }
            }
        }
        self.line_through(anchor, &direction)
    }

    pub fn random_line_subset(&self, anchor: &Action, seed: u64) -> Vec<Action> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.random_line(anchor, &mut rng)
    }

    /// Reads a grid file. One dimension per line:
    ///
    /// ```text
    /// # comment
    /// knee_position = 100, 1500, 4
    /// ```
    ///
    /// i.e. `name = lower, upper, count`. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self, GridError> {
        let mut dims = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| GridError::Parse {
                line: n + 1,
                message: message.to_string(),
            };
            let (name, rest) = line.split_once('=').ok_or_else(|| err("expected `name = lower, upper, count`"))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(err("empty dimension name"));
            }
            let fields: Vec<&str> = rest.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err("expected three comma-separated fields"));
            }
            let lower: f64 = fields[0].parse().map_err(|_| err("lower bound is not a number"))?;
            let upper: f64 = fields[1].parse().map_err(|_| err("upper bound is not a number"))?;
            let count: usize = fields[2].parse().map_err(|_| err("count is not an integer"))?;
            dims.push(DimensionSpec::new(name, lower, upper, count));
        }
        Self::new(dims)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GridError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }
}

/// Removes duplicate ids, keeping the first occurrence.
pub(crate) fn dedup_by_id(actions: impl IntoIterator<Item = Action>) -> Vec<Action> {
    let mut seen = HashSet::new();
    actions.into_iter().filter(|a| seen.insert(a.id)).collect()
}

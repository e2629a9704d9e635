//! Thompson-sampling action selection over visited actions plus a random line.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_space::{dedup_by_id, Action, ActionGrid, ActionId};
use crate::preference_gp::{posterior_sample_with, GpError, PosteriorModel};

/// Actions the posterior is maintained over.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    visited: Vec<Action>,
    line: Vec<Action>,
}

impl CandidateSet {
    pub fn visited(&self) -> &[Action] {
        &self.visited
    }

    pub fn line(&self) -> &[Action] {
        &self.line
    }

    pub fn is_visited(&self, id: ActionId) -> bool {
        self.visited.iter().any(|a| a.id == id)
    }

    /// Records a deployed action. Returns false if it was already visited.
    pub fn visit(&mut self, action: Action) -> bool {
        if self.is_visited(action.id) {
            return false;
        }
        self.visited.push(action);
        true
    }

    /// Visited actions followed by line points not yet visited.
    pub fn union(&self) -> Vec<Action> {
        dedup_by_id(self.visited.iter().chain(&self.line).cloned())
    }

    pub fn visited_ids(&self) -> Vec<ActionId> {
        self.visited.iter().map(|a| a.id).collect()
    }

    pub fn find(&self, id: ActionId) -> Option<&Action> {
        self.visited.iter().chain(&self.line).find(|a| a.id == id)
    }
}

/// Replaces the line with a fresh random line through `anchor`.
pub fn refresh_candidates(set: &CandidateSet, grid: &ActionGrid, anchor: &Action, seed: u64) -> CandidateSet {
    CandidateSet {
        visited: set.visited.clone(),
        line: grid.random_line_subset(anchor, seed),
    }
}

/// Index of the largest score; exact ties go to the lowest action id.
fn argmax_by_id(ids: &[ActionId], scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        best = match best {
            None => Some((i, s)),
            Some((j, b)) if s > b || (s == b && ids[i] < ids[j]) => Some((i, s)),
            keep => keep,
        };
    }
    best.map(|(i, _)| i)
}

/// Draws one utility vector from the posterior and returns its maximizer.
/// With `restrict_to` set, only those candidates compete.
pub fn next_action_with<R: Rng + ?Sized>(
    model: &PosteriorModel,
    restrict_to: Option<&[ActionId]>,
    rng: &mut R,
) -> Result<ActionId, GpError> {
    if model.is_empty() {
        return Err(GpError::Empty);
    }
    let draw = posterior_sample_with(model, rng)?;
    let pool: Vec<usize> = match restrict_to {
        Some(allowed) => (0..model.len())
            .filter(|&i| allowed.contains(&model.action_ids[i]))
            .collect(),
        None => (0..model.len()).collect(),
    };
    let ids: Vec<ActionId> = pool.iter().map(|&i| model.action_ids[i]).collect();
    let best = argmax_by_id(&ids, pool.iter().map(|&i| draw[i])).ok_or(GpError::Empty)?;
    Ok(ids[best])
}

pub fn next_action(model: &PosteriorModel, seed: u64) -> Result<ActionId, GpError> {
    next_action_with(model, None, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Posterior-mean maximizer among the visited actions. Unvisited candidates
/// are never returned. `None` when no visited action is in the model.
pub fn believed_best(model: &PosteriorModel, visited: &[ActionId]) -> Option<(ActionId, f64)> {
    let pool: Vec<usize> = (0..model.len())
        .filter(|&i| visited.contains(&model.action_ids[i]))
        .collect();
    let ids: Vec<ActionId> = pool.iter().map(|&i| model.action_ids[i]).collect();
    argmax_by_id(&ids, pool.iter().map(|&i| model.mean[i])).map(|k| (ids[k], model.mean[pool[k]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::DimensionSpec;
    use nalgebra::{DMatrix, DVector};
    use std::collections::HashSet;

    fn model(ids: &[u64], mean: &[f64], cov: DMatrix<f64>) -> PosteriorModel {
        PosteriorModel {
            action_ids: ids.iter().map(|&i| ActionId(i)).collect(),
            mean: DVector::from_column_slice(mean),
            covariance: cov,
            converged: true,
            iterations: 0,
        }
    }

    #[test]
    fn degenerate_draw_is_greedy() {
        let m = model(&[0, 1, 2], &[0.1, 0.7, 0.3], DMatrix::zeros(3, 3));
        for seed in 0..10 {
            assert_eq!(next_action(&m, seed).unwrap(), ActionId(1));
        }
    }

    #[test]
    fn degenerate_tie_goes_to_lower_id() {
        let m = model(&[8, 4, 6], &[0.5, 0.5, 0.2], DMatrix::zeros(3, 3));
        assert_eq!(next_action(&m, 0).unwrap(), ActionId(4));
    }

    #[test]
    fn symmetric_pair_is_a_coin_flip() {
        let m = model(&[0, 1], &[0.0, 0.0], DMatrix::identity(2, 2));
        let firsts = (0..10_000u64).filter(|&s| next_action(&m, s).unwrap() == ActionId(0)).count();
        let freq = firsts as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn restriction_limits_pool() {
        let m = model(&[0, 1, 2], &[0.1, 0.7, 0.3], DMatrix::zeros(3, 3));
        let pick = next_action_with(&m, Some(&[ActionId(0), ActionId(2)]), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pick, ActionId(2));
    }

    #[test]
    fn believed_best_cases() {
        let m = model(&[5], &[-1.0], DMatrix::identity(1, 1));
        assert_eq!(believed_best(&m, &[ActionId(5)]).unwrap().0, ActionId(5));

        let m = model(&[7, 3, 9], &[2.0, 5.0, 5.0], DMatrix::identity(3, 3));
        let visited = [ActionId(7), ActionId(3), ActionId(9)];
        assert_eq!(believed_best(&m, &visited).unwrap(), (ActionId(3), 5.0));
        // Unvisited line points never win.
        assert_eq!(believed_best(&m, &[ActionId(7)]).unwrap().0, ActionId(7));
        assert!(believed_best(&m, &[]).is_none());
    }

    #[test]
    fn believed_best_ignores_monotone_transforms() {
        let mean = [0.3, -2.0, 1.7, 1.1, 0.0];
        let ids = [10, 11, 12, 13, 14];
        let visited: Vec<ActionId> = ids.iter().map(|&i| ActionId(i)).collect();
        let base = believed_best(&model(&ids, &mean, DMatrix::identity(5, 5)), &visited).unwrap().0;
        for transform in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3)] {
            let mapped: Vec<f64> = mean.iter().map(|&x| transform(x)).collect();
            let m = model(&ids, &mapped, DMatrix::identity(5, 5));
            assert_eq!(believed_best(&m, &visited).unwrap().0, base);
        }
    }

    fn cube() -> ActionGrid {
        ActionGrid::new((0..3).map(|i| DimensionSpec::new(format!("d{i}"), 0.0, 1.0, 4)).collect()).unwrap()
    }

    #[test]
    fn refresh_from_empty_is_line() {
        let grid = cube();
        let anchor = grid.random_action(&mut ChaCha8Rng::seed_from_u64(2));
        let set = refresh_candidates(&CandidateSet::default(), &grid, &anchor, 17);
        assert_eq!(set.union(), grid.random_line_subset(&anchor, 17));
    }

    #[test]
    fn refresh_inside_visited_adds_nothing() {
        let grid = cube();
        let anchor = grid.action_from_indices(&[1, 2, 3]).unwrap();
        let mut set = CandidateSet::default();
        for a in grid.line_through(&anchor, &[1, 0, 0]) {
            set.visit(a);
        }
        // Every seed whose line is the first axis reproduces the visited set.
        let seed = (0..200)
            .find(|&s| grid.random_line_subset(&anchor, s).iter().all(|a| set.is_visited(a.id)))
            .expect("some seed picks the first axis");
        let refreshed = refresh_candidates(&set, &grid, &anchor, seed);
        assert_eq!(refreshed.union(), set.visited().to_vec());
    }

    #[test]
    fn union_cardinality_bound() {
        let grid = cube();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = CandidateSet::default();
        for step in 0..40u64 {
            let a = grid.random_action(&mut rng);
            set.visit(a.clone());
            set = refresh_candidates(&set, &grid, &a, step);
            let visited: HashSet<ActionId> = set.visited_ids().into_iter().collect();
            let line: HashSet<ActionId> = set.line().iter().map(|a| a.id).collect();
            let union = set.union();
            let union_ids: HashSet<ActionId> = union.iter().map(|a| a.id).collect();
            assert_eq!(union_ids.len(), union.len());
            assert_eq!(union_ids, &visited | &line);
            assert_eq!(union.len(), visited.len() + line.len() - visited.intersection(&line).count());
            assert!(union.iter().all(|a| grid.contains(a)));
        }
    }
}

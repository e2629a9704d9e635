//! Scores plant episodes as a stand-in operator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeedbackEvent, Preference};
use crate::clf_plant::EpisodeMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoraterWeights {
    pub tracking: f64,
    pub chatter: f64,
    pub saturation: f64,
    pub vdot: f64,
    /// Scores below this are "very bad".
    pub bad_below: f64,
    /// Scores above this are "very good".
    pub good_above: f64,
}

impl Default for AutoraterWeights {
    fn default() -> Self {
        Self {
            tracking: 1.0,
            chatter: 0.05,
            saturation: 0.2,
            vdot: 0.0,
            bad_below: -0.15,
            good_above: -0.09,
        }
    }
}

impl AutoraterWeights {
    pub fn score(&self, m: &EpisodeMetrics) -> f64 {
        -(self.tracking * m.tracking_rms
            + self.chatter * m.torque_chatter
            + self.saturation * m.saturation_frac
            + self.vdot * m.vdot_violation)
    }

    pub fn label(&self, m: &EpisodeMetrics) -> usize {
        let s = self.score(m);
        if s < self.bad_below {
            1
        } else if s > self.good_above {
            3
        } else {
            2
        }
    }
}

/// Feedback for the newest episode: prefer the higher score (fair coin on
/// ties) and label the new episode by the score thresholds. Without a
/// previous episode only the label is given.
pub fn plant_autorater_feedback<R: Rng + ?Sized>(
    new: &EpisodeMetrics,
    old: Option<&EpisodeMetrics>,
    weights: &AutoraterWeights,
    rng: &mut R,
) -> FeedbackEvent {
    let preference = old.map(|old| {
        let (s_new, s_old) = (weights.score(new), weights.score(old));
        let new_wins = if s_new == s_old { rng.gen_bool(0.5) } else { s_new > s_old };
        if new_wins {
            Preference::New
        } else {
            Preference::Old
        }
    });
    FeedbackEvent {
        preference,
        ordinal: Some(weights.label(new)),
        note: "autorater".into(),
        ..FeedbackEvent::default()
    }
}

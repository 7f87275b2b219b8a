//! Kinematic 2-D point-mass environment and its scripted, behaviorally
//! diverse trajectory corpus.
//!
//! Each mode drives the point mass with its own turn rate, cruising speed and
//! heading waviness, so episodes of different modes are comparably "good" but
//! stylistically distinct. The initial heading is drawn per episode from a
//! half circle, so a mode is a style of motion rather than a direction.

mod io;
mod normalize;
mod oracle;
mod pairs;

use ndarray::{concatenate, Array2, ArrayView1, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    append_label, read_corpus, read_labels, write_corpus, write_labels, CorpusManifest,
    LabelRecord, ReferenceScore,
};
pub use normalize::Normalizer;
pub use oracle::{oracle_label, OracleKind, OracleSpec, TIE_TOLERANCE};
pub use pairs::{
    make_query_pairs, resolve_labels, LabelSource, PreferenceLabel, PreferencePair, QueryPair,
    Segment, SegmentRef, Side,
};

/// Integration step.
pub const DT: f64 = 0.1;
/// Largest admissible action magnitude.
pub const MAX_ACTION: f64 = 1.0;
pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

const SPEED_JITTER: f64 = 0.05;
const ACTION_NOISE: f64 = 0.02;
const START_SPREAD: f64 = 0.5;
const WAVE_FREQ: f64 = 1.5;
/// Initial headings are uniform over this arc, centred on +x.
const HEADING_ARC: f64 = std::f64::consts::PI;

/// One episode: `L` states and the `L` actions applied at them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullTrajectory {
    pub episode_id: usize,
    pub mode_id: usize,
    #[serde(with = "io::rows")]
    pub states: Array2<f64>,
    #[serde(with = "io::rows")]
    pub actions: Array2<f64>,
}

impl FullTrajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// `L x (S + A)`: states then actions per timestep.
    pub fn matrix(&self) -> Array2<f64> {
        concatenate![Axis(1), self.states, self.actions]
    }

    /// Largest violation of `s[t+1] = s[t] + dt * a[t]`.
    pub fn dynamics_residual(&self) -> f64 {
        (0..self.len().saturating_sub(1))
            .flat_map(|t| {
                (0..self.states.ncols()).map(move |d| {
                    (self.states[[t + 1, d]] - self.states[[t, d]] - DT * self.actions[[t, d]])
                        .abs()
                })
            })
            .fold(0.0, f64::max)
    }
}

/// `state + dt * action`, with the action first clamped to magnitude 1.
pub fn step_dynamics(state: ArrayView1<f64>, action: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let clamped = clamp_action(action);
    &state + &(clamped * DT)
}

pub fn clamp_action(action: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let norm = action.dot(&action).sqrt();
    if norm > MAX_ACTION {
        action.mapv(|a| a * MAX_ACTION / norm)
    } else {
        action.to_owned()
    }
}

/// Controller parameters of one behavior mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    /// Heading drift, radians per time unit. Increases with the mode index.
    pub turn_rate: f64,
    /// Cruising speed, units per time unit. Increases with the mode index.
    pub speed: f64,
    /// Amplitude of the sinusoidal heading oscillation, radians.
    pub wave_amp: f64,
}

pub fn mode_params(mode: usize, n_modes: usize) -> ModeParams {
    let frac = if n_modes > 1 {
        mode as f64 / (n_modes - 1) as f64
    } else {
        0.0
    };
    ModeParams {
        turn_rate: -0.15 + 0.3 * frac,
        speed: 0.3 + 0.6 * frac,
        wave_amp: if mode.is_multiple_of(2) { 0.1 } else { 0.4 },
    }
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    // splitmix64 finalizer over (seed, episode)
    let mut z = seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls out one episode of `mode` with its own seeded jitter.
pub fn rollout_mode(
    episode_id: usize,
    mode_id: usize,
    n_modes: usize,
    len: usize,
    seed: u64,
) -> FullTrajectory {
    let params = mode_params(mode_id, n_modes);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, episode_id));
    let noise = Normal::new(0.0, ACTION_NOISE).expect("std");
    let start = Normal::new(0.0, START_SPREAD).expect("std");

    let heading0 = rng.random_range(-HEADING_ARC / 2.0..HEADING_ARC / 2.0);
    let speed = params.speed * (1.0 + rng.random_range(-SPEED_JITTER..SPEED_JITTER));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut state = ndarray::arr1(&[start.sample(&mut rng), start.sample(&mut rng)]);

    let mut states = Array2::zeros((len, STATE_DIM));
    let mut actions = Array2::zeros((len, ACTION_DIM));
    for t in 0..len {
        let time = t as f64 * DT;
        let theta =
            heading0 + params.turn_rate * time + params.wave_amp * (WAVE_FREQ * time + phase).sin();
        let raw = ndarray::arr1(&[
            speed * theta.cos() + noise.sample(&mut rng),
            speed * theta.sin() + noise.sample(&mut rng),
        ]);
        let action = clamp_action(raw.view());
        states.row_mut(t).assign(&state);
        actions.row_mut(t).assign(&action);
        state = step_dynamics(state.view(), action.view());
    }
    FullTrajectory {
        episode_id,
        mode_id,
        states,
        actions,
    }
}

/// Uniform random actions in the unit disk; the low reference controller.
pub fn rollout_random(episode_id: usize, len: usize, seed: u64) -> FullTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed ^ 0xA5A5_5A5A, episode_id));
    let mut state = ndarray::arr1(&[0.0, 0.0]);
    let mut states = Array2::zeros((len, STATE_DIM));
    let mut actions = Array2::zeros((len, ACTION_DIM));
    for t in 0..len {
        let r = rng.random_range(0.0f64..1.0).sqrt();
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let action = ndarray::arr1(&[r * th.cos(), r * th.sin()]);
        states.row_mut(t).assign(&state);
        actions.row_mut(t).assign(&action);
        state = step_dynamics(state.view(), action.view());
    }
    FullTrajectory {
        episode_id,
        mode_id: usize::MAX,
        states,
        actions,
    }
}

/// `n_episodes` balanced across `n_modes` (episode `i` has mode `i % n_modes`).
pub fn generate_corpus(
    n_episodes: usize,
    len: usize,
    n_modes: usize,
    seed: u64,
) -> Result<Vec<FullTrajectory>> {
    if n_modes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 modes, got {n_modes}"
        )));
    }
    if len < 2 {
        return Err(Error::Config(format!(
            "episode length must be >= 2, got {len}"
        )));
    }
    Ok((0..n_episodes)
        .map(|i| rollout_mode(i, i % n_modes, n_modes, len, seed))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn step_identity_and_arithmetic() {
        let s = arr1(&[0.3, -0.2]);
        assert_eq!(step_dynamics(s.view(), arr1(&[0.0, 0.0]).view()), s);
        let out = step_dynamics(arr1(&[0.0, 0.0]).view(), arr1(&[1.0, 0.0]).view());
        assert_eq!(out, arr1(&[0.1, 0.0]));
        let out = step_dynamics(arr1(&[0.0, 0.0]).view(), arr1(&[1.2, 1.6]).view());
        assert!((out.dot(&out).sqrt() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn corpus_is_dynamics_consistent_and_balanced() {
        let corpus = generate_corpus(750, 64, 4, 7).unwrap();
        assert_eq!(corpus.len(), 750);
        assert!(corpus
            .iter()
            .all(|e| e.len() == 64 && e.dynamics_residual() < 1e-9));
        for m in 0..4 {
            let count = corpus.iter().filter(|e| e.mode_id == m).count();
            assert!((187..=188).contains(&count));
        }
        assert!(corpus.iter().all(|e| e
            .actions
            .outer_iter()
            .all(|a| a.dot(&a).sqrt() <= MAX_ACTION + 1e-12)));
    }

    #[test]
    fn corpus_is_deterministic() {
        assert_eq!(
            generate_corpus(20, 32, 3, 1).unwrap(),
            generate_corpus(20, 32, 3, 1).unwrap()
        );
        assert_ne!(
            generate_corpus(20, 32, 3, 1).unwrap(),
            generate_corpus(20, 32, 3, 2).unwrap()
        );
    }

    #[test]
    fn curl_separates_modes_in_turn_rate_order() {
        let corpus = generate_corpus(400, 64, 4, 3).unwrap();
        let curl = OracleSpec::new(OracleKind::Curl, 1);
        let means: Vec<f64> = (0..4)
            .map(|m| {
                let eps: Vec<_> = corpus.iter().filter(|e| e.mode_id == m).collect();
                eps.iter()
                    .map(|e| curl.reward(e.matrix().view(), STATE_DIM))
                    .sum::<f64>()
                    / eps.len() as f64
            })
            .collect();
        let mut by_turn: Vec<usize> = (0..4).collect();
        by_turn.sort_by(|&a, &b| {
            mode_params(a, 4)
                .turn_rate
                .total_cmp(&mode_params(b, 4).turn_rate)
        });
        let mut by_curl: Vec<usize> = (0..4).collect();
        by_curl.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
        assert_eq!(by_turn, by_curl, "{means:?}");
    }

    #[test]
    fn rejects_single_mode() {
        assert!(generate_corpus(10, 64, 1, 0).is_err());
    }
}

//! Trajectory segments, query pairs and preference labels.

use std::collections::{HashMap, HashSet};

use ndarray::{s, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FullTrajectory, Normalizer};
use crate::error::{Error, Result};

/// Where a segment was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRef {
    pub episode_id: usize,
    pub start: usize,
}

/// `H x (S + A)` rows cut contiguously from an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub matrix: Array2<f64>,
    pub source: SegmentRef,
}

impl Segment {
    pub fn cut(episode: &FullTrajectory, start: usize, horizon: usize) -> Result<Self> {
        if start + horizon > episode.len() {
            return Err(Error::Config(format!(
                "segment {start}..{} exceeds episode length {}",
                start + horizon,
                episode.len()
            )));
        }
        Ok(Self {
            matrix: episode
                .matrix()
                .slice(s![start..start + horizon, ..])
                .to_owned(),
            source: SegmentRef {
                episode_id: episode.episode_id,
                start,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPair {
    pub pair_id: String,
    pub a: Segment,
    pub b: Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Self {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceLabel {
    pub pair_id: String,
    pub winner: Side,
    pub source: LabelSource,
}

/// A labeled pair resolved to normalized winner/loser matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: Array2<f64>,
    pub loser: Array2<f64>,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        Self {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
        }
    }
}

/// Joins labels with the pairs they refer to and normalizes both segments.
pub fn resolve_labels(
    labels: &[PreferenceLabel],
    pairs: &[QueryPair],
    normalizer: &Normalizer,
) -> Result<Vec<PreferencePair>> {
    let by_id: HashMap<&str, &QueryPair> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    labels
        .iter()
        .map(|l| {
            let pair = by_id
                .get(l.pair_id.as_str())
                .ok_or_else(|| Error::UnknownPair(l.pair_id.clone()))?;
            let (w, lo) = match l.winner {
                Side::A => (&pair.a, &pair.b),
                Side::B => (&pair.b, &pair.a),
            };
            Ok(PreferencePair {
                winner: normalizer.normalize(w.matrix.view())?,
                loser: normalizer.normalize(lo.matrix.view())?,
            })
        })
        .collect()
}

/// `n_query` pairs of distinct segments drawn uniformly over
/// `(episode, start)`.
pub fn make_query_pairs(
    corpus: &[FullTrajectory],
    n_query: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<QueryPair>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let starts_per_ep: Vec<usize> = corpus
        .iter()
        .map(|e| (e.len() + 1).saturating_sub(horizon))
        .collect();
    let budget: usize = starts_per_ep.iter().sum();
    let needed = 2 * n_query;
    if needed > budget {
        return Err(Error::Config(format!(
            "{n_query} pairs need {needed} distinct segments but only {budget} exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<(usize, usize)> = if needed * 4 >= budget {
        let mut all: Vec<(usize, usize)> = starts_per_ep
            .iter()
            .enumerate()
            .flat_map(|(e, &n)| (0..n).map(move |s| (e, s)))
            .collect();
        for i in 0..needed {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(needed);
        all
    } else {
        let eligible: Vec<usize> = (0..corpus.len())
            .filter(|&e| starts_per_ep[e] > 0)
            .collect();
        let mut seen = HashSet::with_capacity(needed);
        let mut keys = Vec::with_capacity(needed);
        while keys.len() < needed {
            // Uniform over (episode, start) when episodes share a length.
            let e = eligible[rng.random_range(0..eligible.len())];
            let s = rng.random_range(0..starts_per_ep[e]);
            if seen.insert((e, s)) {
                keys.push((e, s));
            }
        }
        keys
    };
    keys.chunks(2)
        .enumerate()
        .map(|(i, kv)| {
            Ok(QueryPair {
                pair_id: format!("q{seed:016x}-{i:05}"),
                a: Segment::cut(&corpus[kv[0].0], kv[0].1, horizon)?,
                b: Segment::cut(&corpus[kv[1].0], kv[1].1, horizon)?,
            })
        })
        .collect()
}

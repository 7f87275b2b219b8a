//! Corpus and label files.
//!
//! A corpus directory holds `corpus.jsonl` (one episode object per line) and
//! `manifest.json`. Label files are newline-delimited records referencing
//! segments by `(episode_id, start)`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    rollout_mode, rollout_random, FullTrajectory, LabelSource, Normalizer, OracleKind, OracleSpec,
    PreferenceLabel, QueryPair, Segment, SegmentRef, Side, ACTION_DIM, DT, STATE_DIM,
};
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Serializes a matrix as a list of rows.
pub(crate) mod rows {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((flat.len().checked_div(ncols).unwrap_or(0), ncols), flat)
            .map_err(serde::de::Error::custom)
    }
}

/// Low and high reference returns of one oracle, for normalized scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceScore {
    pub oracle: OracleSpec,
    /// Mean segment reward of the uniform-random controller.
    pub random: f64,
    /// Mean segment reward of the best scripted mode.
    pub expert: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode_len: usize,
    pub dt: f64,
    pub n_modes: usize,
    pub n_episodes: usize,
    pub seed: u64,
    /// Segment length the reference scores were computed at.
    pub horizon: usize,
    pub normalizer: Normalizer,
    pub reference_scores: Vec<ReferenceScore>,
}

const REFERENCE_EPISODES: usize = 64;

fn mean_segment_reward(episodes: &[FullTrajectory], oracle: &OracleSpec, horizon: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        let m = ep.matrix();
        let mut start = 0;
        while start + horizon <= ep.len() {
            total += oracle.reward(m.slice(ndarray::s![start..start + horizon, ..]), STATE_DIM);
            count += 1;
            start += horizon;
        }
    }
    total / count.max(1) as f64
}

impl CorpusManifest {
    /// Fits the normalizer and evaluates the reference controllers.
    pub fn build(
        corpus: &[FullTrajectory],
        n_modes: usize,
        seed: u64,
        horizon: usize,
    ) -> Result<Self> {
        let first = corpus
            .first()
            .ok_or_else(|| Error::Empty("corpus".into()))?;
        let len = first.len();
        if horizon > len {
            return Err(Error::Config(format!(
                "horizon {horizon} exceeds episode length {len}"
            )));
        }
        let ref_seed = seed ^ 0x5E_ED0F_2EF5;
        let random: Vec<_> = (0..REFERENCE_EPISODES)
            .map(|i| rollout_random(i, len, ref_seed))
            .collect();
        let per_mode: Vec<Vec<_>> = (0..n_modes)
            .map(|m| {
                (0..REFERENCE_EPISODES / 2)
                    .map(|i| rollout_mode(i * n_modes + m, m, n_modes, len, ref_seed))
                    .collect()
            })
            .collect();
        let mut reference_scores = Vec::new();
        for kind in OracleKind::ALL {
            for sign in [1, -1] {
                let oracle = OracleSpec::new(kind, sign);
                let expert = per_mode
                    .iter()
                    .map(|eps| mean_segment_reward(eps, &oracle, horizon))
                    .fold(f64::NEG_INFINITY, f64::max);
                reference_scores.push(ReferenceScore {
                    oracle,
                    random: mean_segment_reward(&random, &oracle, horizon),
                    expert,
                });
            }
        }
        Ok(Self {
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            episode_len: len,
            dt: DT,
            n_modes,
            n_episodes: corpus.len(),
            seed,
            horizon,
            normalizer: Normalizer::fit(corpus)?,
            reference_scores,
        })
    }

    pub fn reference(&self, oracle: &OracleSpec) -> Option<&ReferenceScore> {
        self.reference_scores.iter().find(|r| r.oracle == *oracle)
    }

    /// Checks that `corpus` is the data this manifest describes.
    pub fn check(&self, corpus: &[FullTrajectory]) -> Result<()> {
        if corpus.len() != self.n_episodes {
            return Err(Error::Config(format!(
                "manifest lists {} episodes, corpus has {}",
                self.n_episodes,
                corpus.len()
            )));
        }
        for ep in corpus {
            if ep.len() != self.episode_len
                || ep.states.ncols() != self.state_dim
                || ep.actions.ncols() != self.action_dim
            {
                return Err(Error::Config(format!(
                    "episode {} does not match manifest shape",
                    ep.episode_id
                )));
            }
        }
        Ok(())
    }
}

pub fn write_corpus(
    dir: &Path,
    corpus: &[FullTrajectory],
    manifest: &CorpusManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(CORPUS_FILE))?);
    for ep in corpus {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut m = serde_json::to_string_pretty(manifest)?;
    m.push('\n');
    fs::write(dir.join(MANIFEST_FILE), m)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<(Vec<FullTrajectory>, CorpusManifest)> {
    let manifest: CorpusManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let reader = BufReader::new(File::open(dir.join(CORPUS_FILE))?);
    let mut corpus = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            corpus.push(serde_json::from_str(&line)?);
        }
    }
    manifest.check(&corpus)?;
    Ok((corpus, manifest))
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub pair_id: String,
    pub a: SegmentRef,
    pub b: SegmentRef,
    pub winner: Side,
    pub source: LabelSource,
    /// Milliseconds since the Unix epoch; 0 for generated labels.
    pub timestamp: u64,
}

impl LabelRecord {
    pub fn new(pair: &QueryPair, label: &PreferenceLabel, timestamp: u64) -> Self {
        Self {
            pair_id: pair.pair_id.clone(),
            a: pair.a.source,
            b: pair.b.source,
            winner: label.winner,
            source: label.source,
            timestamp,
        }
    }

    pub fn label(&self) -> PreferenceLabel {
        PreferenceLabel {
            pair_id: self.pair_id.clone(),
            winner: self.winner,
            source: self.source,
        }
    }

    /// Re-cuts both segments from the corpus.
    pub fn pair(&self, corpus: &[FullTrajectory], horizon: usize) -> Result<QueryPair> {
        let find = |r: SegmentRef| {
            corpus
                .iter()
                .find(|e| e.episode_id == r.episode_id)
                .ok_or_else(|| {
                    Error::UnknownPair(format!("{} (episode {})", self.pair_id, r.episode_id))
                })
                .and_then(|e| Segment::cut(e, r.start, horizon))
        };
        Ok(QueryPair {
            pair_id: self.pair_id.clone(),
            a: find(self.a)?,
            b: find(self.b)?,
        })
    }
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one record and syncs it to disk before returning.
pub fn append_label(path: &Path, record: &LabelRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

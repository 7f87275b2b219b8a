//! Metrics: normalized score, oracle win rate and the latent-structure probe.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{OracleSpec, TIE_TOLERANCE};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::ple::MapperParams;

/// `100 * (score - random) / (expert - random)`.
pub fn normalized_score(score: f64, random: f64, expert: f64) -> Result<f64> {
    let span = expert - random;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::Config(format!(
            "degenerate reference scores: random {random}, expert {expert}"
        )));
    }
    // Dividing first keeps both endpoints exact.
    Ok(100.0 * ((score - random) / span))
}

/// Fraction of pairings in which `oracle` prefers the `a` sample; ties count
/// one half.
///
/// Pairing is index-aligned over `n = min(|a|, |b|)` samples. When one side is
/// longer, `seed` picks which of its samples take part; the choice depends on
/// the lengths only, so `win_rate(a, b) + win_rate(b, a) = 1` for a shared
/// seed.
pub fn win_rate(
    a: &[Array2<f64>],
    b: &[Array2<f64>],
    oracle: &OracleSpec,
    state_dim: usize,
    seed: u64,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("win-rate sample set".into()));
    }
    let n = a.len().min(b.len());
    let pick = |len: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        if len > n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
        }
        idx
    };
    let (ia, ib) = (pick(a.len()), pick(b.len()));
    let total: f64 = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| {
            let ra = oracle.reward(a[i].view(), state_dim);
            let rb = oracle.reward(b[j].view(), state_dim);
            if (ra - rb).abs() < TIE_TOLERANCE {
                0.5
            } else if ra > rb {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / n as f64)
}

pub fn mean_reward(samples: &[Array2<f64>], oracle: &OracleSpec, state_dim: usize) -> f64 {
    samples
        .iter()
        .map(|s| oracle.reward(s.view(), state_dim))
        .sum::<f64>()
        / samples.len().max(1) as f64
}

/// Minimum episodes of every mode the probe accepts.
pub const MIN_EPISODES_PER_MODE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy of the linear probe.
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// `n x 2` principal-component coordinates, one row per episode.
    pub projection: Vec<[f64; 2]>,
    pub mode_ids: Vec<usize>,
    /// Oracle reward of each whole episode.
    pub rewards: Vec<f64>,
}

/// Maps every episode, fits a multinomial logistic probe for `mode_ids` on a
/// seeded 80/20 split, and projects the latents onto two principal components.
pub fn latent_probe(
    mapper: &MapperParams,
    episodes: &[ArrayView2<f64>],
    mode_ids: &[usize],
    raw_episodes: &[ArrayView2<f64>],
    oracle: &OracleSpec,
    state_dim: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if episodes.len() != mode_ids.len() || episodes.len() != raw_episodes.len() {
        return Err(Error::shape(
            "probe episodes",
            episodes.len(),
            mode_ids.len(),
        ));
    }
    let n_modes = mode_ids.iter().max().map_or(0, |m| m + 1);
    for m in 0..n_modes {
        let count = mode_ids.iter().filter(|&&x| x == m).count();
        if count < MIN_EPISODES_PER_MODE {
            return Err(Error::Config(format!(
                "mode {m} has {count} episodes; the probe needs at least {MIN_EPISODES_PER_MODE}"
            )));
        }
    }
    let d = mapper.ple_dim();
    let mut z = Array2::<f64>::zeros((episodes.len(), d));
    for (i, ep) in episodes.iter().enumerate() {
        z.row_mut(i).assign(&Array1::from(mapper.map(*ep)?));
    }

    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (episodes.len() * 4).div_ceil(5).min(episodes.len() - 1);
    let (train, test) = order.split_at(n_train);
    let probe = SoftmaxProbe::fit(&z, mode_ids, train, n_modes);
    Ok(ProbeReport {
        accuracy: probe.accuracy(&z, mode_ids, test),
        train_accuracy: probe.accuracy(&z, mode_ids, train),
        projection: pca2(&z),
        mode_ids: mode_ids.to_vec(),
        rewards: raw_episodes
            .iter()
            .map(|e| oracle.reward(*e, state_dim))
            .collect(),
    })
}

/// Linear softmax classifier on standardized features.
struct SoftmaxProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    /// `(d + 1) x classes`, bias in the last row.
    weight: Array2<f64>,
}

const PROBE_STEPS: usize = 1500;
const PROBE_L2: f64 = 1e-4;

impl SoftmaxProbe {
    fn features(&self, z: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        let d = z.ncols();
        let mut x = Array2::<f64>::ones((rows.len(), d + 1));
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..d {
                x[[r, j]] = (z[[i, j]] - self.mean[j]) / self.scale[j];
            }
        }
        x
    }

    fn fit(z: &Array2<f64>, labels: &[usize], rows: &[usize], classes: usize) -> Self {
        let d = z.ncols();
        let sub = z.select(Axis(0), rows);
        let mean = sub.mean_axis(Axis(0)).expect("nonempty");
        let scale = sub
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let mut probe = Self {
            mean,
            scale,
            weight: Array2::zeros((d + 1, classes)),
        };
        let x = probe.features(z, rows);
        let mut onehot = Array2::<f64>::zeros((rows.len(), classes));
        for (r, &i) in rows.iter().enumerate() {
            onehot[[r, labels[i]]] = 1.0;
        }
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), (d + 1) * classes);
        for _ in 0..PROBE_STEPS {
            let p = softmax_rows(x.dot(&probe.weight));
            let mut g = x.t().dot(&(p - &onehot)) / rows.len() as f64;
            g.scaled_add(PROBE_L2, &probe.weight);
            adam.step(
                probe.weight.as_slice_mut().expect("standard"),
                g.as_slice().expect("standard"),
            );
        }
        probe
    }

    fn accuracy(&self, z: &Array2<f64>, labels: &[usize], rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let scores = self.features(z, rows).dot(&self.weight);
        let hits = rows
            .iter()
            .zip(scores.outer_iter())
            .filter(|(&i, s)| argmax(s.as_slice().expect("row")) == labels[i])
            .count();
        hits as f64 / rows.len() as f64
    }
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let total = row.sum();
        row /= total;
    }
    s
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Coordinates on the two leading principal axes. Each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca2(z: &Array2<f64>) -> Vec<[f64; 2]> {
    let (n, d) = z.dim();
    if n == 0 {
        return Vec::new();
    }
    let mean = z.mean_axis(Axis(0)).expect("nonempty");
    let centered = z - &mean;
    let cov = centered.t().dot(&centered) / n.max(2).saturating_sub(1) as f64;
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axes: Vec<Array1<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let col = Array1::from_iter((0..d).map(|i| eig.eigenvectors[(i, c)]));
            let lead = col
                .iter()
                .fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                -col
            } else {
                col
            }
        })
        .collect();
    centered
        .outer_iter()
        .map(|row| {
            let p = |k: usize| axes.get(k).map_or(0.0, |a| row.dot(a));
            [p(0), p(1)]
        })
        .collect()
}

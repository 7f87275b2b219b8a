//! Preference latent embeddings: the masked trajectory mapper, latent priors
//! and preference inversion against a frozen denoiser.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{
    check_traj, sigmoid, squared_error, stack, view2, Context, Denoiser, DenoiserParams,
    GradRequest,
};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{forward_noise_rows, NoiseSchedule};

/// Lower and upper bound every latent entry is kept within.
pub const PLE_MIN: f64 = 1e-4;
pub const PLE_MAX: f64 = 1.0 - 1e-4;

pub const MAPPER_WEIGHT: &str = "mapper.w";
pub const MAPPER_BIAS: &str = "mapper.b";

/// Which timesteps of a full trajectory the mapper may see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mask {
    visible: Vec<bool>,
}

impl Mask {
    pub fn new(visible: Vec<bool>) -> Result<Self> {
        if !visible.iter().any(|&v| v) {
            return Err(Error::Config("mask hides every timestep".into()));
        }
        Ok(Self { visible })
    }

    /// Hides a contiguous window of `ceil(len / 2)` central timesteps.
    pub fn central(len: usize) -> Result<Self> {
        let hidden = len.div_ceil(2);
        let start = (len - hidden) / 2;
        Self::new(
            (0..len)
                .map(|t| !(start..start + hidden).contains(&t))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn n_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// The longest run of hidden timesteps.
    pub fn hidden_window(&self) -> Range<usize> {
        let mut best = 0..0;
        let mut t = 0;
        while t < self.visible.len() {
            if self.visible[t] {
                t += 1;
                continue;
            }
            let start = t;
            while t < self.visible.len() && !self.visible[t] {
                t += 1;
            }
            if t - start > best.len() {
                best = start..t;
            }
        }
        best
    }

    /// Segment starts whose `horizon` rows lie entirely in the hidden window.
    pub fn segment_starts(&self, horizon: usize) -> Result<Range<usize>> {
        let w = self.hidden_window();
        if w.len() < horizon {
            return Err(Error::Config(format!(
                "hidden window of {} timesteps cannot hold horizon {horizon}",
                w.len()
            )));
        }
        Ok(w.start..w.end - horizon + 1)
    }
}

/// The mapping `f`: mask, per-timestep affine projection, mean pool, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    /// `(S + A) x d_e`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub mask: Mask,
}

/// Pre-activation and output of one mapping, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MapperTape {
    pooled: Array1<f64>,
    pub z: Vec<f64>,
}

/// Gradients of a scalar loss through one mapping.
#[derive(Debug, Clone)]
pub struct MapperGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `L x (S + A)`; zero on hidden rows.
    pub input: Array2<f64>,
}

impl MapperParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, mask: Mask) -> Result<Self> {
        if bias.len() != weight.ncols() {
            return Err(Error::shape("mapper bias", weight.ncols(), bias.len()));
        }
        Ok(Self { weight, bias, mask })
    }

    /// Reads the mapper slots of a denoiser parameter vector.
    pub fn from_params(params: &DenoiserParams, mask: Mask) -> Self {
        let layout = params.layout();
        Self {
            weight: view2(params.as_slice(), layout.entry(MAPPER_WEIGHT)).to_owned(),
            bias: params.vector(MAPPER_BIAS).to_owned(),
            mask,
        }
    }

    pub fn ple_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, full: ArrayView2<f64>) -> Result<()> {
        if full.nrows() != self.mask.len() {
            return Err(Error::shape(
                "full trajectory length",
                self.mask.len(),
                full.nrows(),
            ));
        }
        if full.ncols() != self.weight.nrows() {
            return Err(Error::shape(
                "transition dim (columns)",
                self.weight.nrows(),
                full.ncols(),
            ));
        }
        Ok(())
    }

    pub fn map(&self, full: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(full)?.z)
    }

    pub fn forward(&self, full: ArrayView2<f64>) -> Result<MapperTape> {
        self.check(full)?;
        let mut pooled = Array1::<f64>::zeros(self.ple_dim());
        for (t, row) in full.outer_iter().enumerate() {
            if self.mask.visible[t] {
                pooled += &(row.dot(&self.weight) + &self.bias);
            }
        }
        pooled /= self.mask.n_visible() as f64;
        let z = pooled.iter().map(|&p| sigmoid(p)).collect();
        Ok(MapperTape { pooled, z })
    }

    /// Backpropagates `dz = d loss / d z` through the mapping of `full`.
    pub fn backward(&self, full: ArrayView2<f64>, tape: &MapperTape, dz: &[f64]) -> MapperGrads {
        let n = self.mask.n_visible() as f64;
        let dpre = Array1::from_iter(
            tape.pooled
                .iter()
                .zip(dz)
                .map(|(&p, &d)| d * sigmoid(p) * (1.0 - sigmoid(p)) / n),
        );
        let mut weight = Array2::zeros(self.weight.raw_dim());
        let mut input = Array2::zeros(full.raw_dim());
        let dx = self.weight.dot(&dpre);
        let mut visible_sum = Array1::<f64>::zeros(full.ncols());
        for (t, row) in full.outer_iter().enumerate() {
            if self.mask.visible[t] {
                visible_sum += &row;
                input.row_mut(t).assign(&dx);
            }
        }
        for (i, &x) in visible_sum.iter().enumerate() {
            weight.row_mut(i).scaled_add(x, &dpre);
        }
        MapperGrads {
            weight,
            bias: dpre * n,
            input,
        }
    }
}

/// Initialization distribution of an inverted latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PriorSpec {
    #[default]
    #[serde(rename = "uniform01")]
    Uniform01,
    /// Gaussian with mean 0.5 and standard deviation 0.5 / 3.
    #[serde(rename = "gaussian_half")]
    GaussianHalf,
    #[serde(rename = "fixed_half")]
    FixedHalf,
}

impl PriorSpec {
    pub const ALL: [PriorSpec; 3] = [
        PriorSpec::Uniform01,
        PriorSpec::GaussianHalf,
        PriorSpec::FixedHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorSpec::Uniform01 => "uniform01",
            PriorSpec::GaussianHalf => "gaussian_half",
            PriorSpec::FixedHalf => "fixed_half",
        }
    }
}

impl std::str::FromStr for PriorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorSpec::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prior {s:?}")))
    }
}

fn clamp_ple(v: f64) -> f64 {
    v.clamp(PLE_MIN, PLE_MAX)
}

pub fn sample_prior(prior: PriorSpec, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match prior {
        PriorSpec::Uniform01 => (0..dim)
            .map(|_| clamp_ple(rng.random_range(0.0..1.0)))
            .collect(),
        PriorSpec::GaussianHalf => {
            let normal = Normal::new(0.5, 0.5 / 3.0).expect("std");
            (0..dim)
                .map(|_| clamp_ple(normal.sample(&mut rng)))
                .collect()
        }
        PriorSpec::FixedHalf => vec![0.5; dim],
    }
}

/// True when every entry lies strictly inside `(0, 1)`.
pub fn in_bounds(z: &[f64]) -> bool {
    z.iter().all(|&v| v > 0.0 && v < 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub n_adapt: usize,
    /// Defaults to `min(16, number of labels)`.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub prior: PriorSpec,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            n_adapt: 5000,
            batch_size: None,
            learning_rate: 0.01,
            prior: PriorSpec::Uniform01,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn effective_batch(&self, n_labels: usize) -> usize {
        self.batch_size.unwrap_or(16.min(n_labels)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub z_w: Vec<f64>,
    pub z_l: Vec<f64>,
    pub loss_history: Vec<f64>,
}

/// State after one inversion update, handed to observers.
#[derive(Debug, Clone, Copy)]
pub struct InversionStep<'a> {
    /// Updates completed so far, starting at 1.
    pub step: usize,
    pub loss: f64,
    pub z_w: &'a [f64],
    pub z_l: &'a [f64],
}

/// One labeled pair noised with a shared `(k, eps)`.
#[derive(Debug, Clone, Copy)]
pub struct InversionItem<'a> {
    pub winner: ArrayView2<'a, f64>,
    pub loser: ArrayView2<'a, f64>,
    pub k: usize,
    pub eps: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct InversionGrads {
    pub loss: f64,
    pub z_w: Vec<f64>,
    pub z_l: Vec<f64>,
}

/// Joint loss `mean_i ||eps_i - eps(w_i, z_w)||^2 + ||eps_i - eps(l_i, z_l)||^2`
/// and its gradients with respect to both latents; `net` is not touched.
pub fn inversion_loss_and_grads(
    net: &Denoiser<'_>,
    schedule: &NoiseSchedule,
    items: &[InversionItem<'_>],
    z_w: &[f64],
    z_l: &[f64],
) -> Result<InversionGrads> {
    if items.is_empty() {
        return Err(Error::Empty("inversion batch".into()));
    }
    let cfg = net.params().config();
    let (h, c, d) = (cfg.horizon, cfg.transition_dim(), cfg.ple_dim);
    for z in [z_w, z_l] {
        if z.len() != d {
            return Err(Error::shape("context length", d, z.len()));
        }
    }
    for it in items {
        check_traj(it.winner, h, c)?;
        check_traj(it.loser, h, c)?;
        check_traj(it.eps, h, c)?;
        schedule.check_step(it.k)?;
    }
    let b = items.len();
    let tau0 = stack(
        items
            .iter()
            .map(|i| i.winner)
            .chain(items.iter().map(|i| i.loser)),
    );
    let eps = stack(
        items
            .iter()
            .map(|i| i.eps)
            .chain(items.iter().map(|i| i.eps)),
    );
    let ks: Vec<usize> = items.iter().chain(items).map(|i| i.k).collect();
    let ctx: Vec<Context> = (0..2 * b)
        .map(|i| Context::Embedding(if i < b { z_w } else { z_l }))
        .collect();
    let x = forward_noise_rows(tau0.view(), &ks, eps.view(), h, schedule);
    let (pred, tape) = net.forward(x.view(), &ks, &ctx)?;
    let (loss, dout) = squared_error(&pred, &eps, b);
    let g = net.backward(&tape, &dout, GradRequest::CONTEXT_ONLY);
    let sum_rows = |r: Range<usize>| g.ctx.slice(ndarray::s![r, ..]).sum_axis(Axis(0)).to_vec();
    Ok(InversionGrads {
        loss,
        z_w: sum_rows(0..b),
        z_l: sum_rows(b..2 * b),
    })
}

pub fn invert_preferences(
    frozen: &DenoiserParams,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    config: &InversionConfig,
) -> Result<Inversion> {
    invert_preferences_with(frozen, schedule, pairs, config, |_| {})
}

/// Optimizes `(z_w, z_l)` against the frozen denoiser, calling `observer`
/// after every update.
pub fn invert_preferences_with(
    frozen: &DenoiserParams,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    config: &InversionConfig,
    mut observer: impl FnMut(InversionStep<'_>),
) -> Result<Inversion> {
    if config.n_adapt == 0 {
        return Err(Error::Config("n_adapt must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("preference labels".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config(
            "inversion learning rate must be positive".into(),
        ));
    }
    let cfg = frozen.config();
    let (h, c, d) = (cfg.horizon, cfg.transition_dim(), cfg.ple_dim);
    for p in pairs {
        check_traj(p.winner.view(), h, c)?;
        check_traj(p.loser.view(), h, c)?;
    }
    let net = Denoiser::new(frozen);
    let batch = config.effective_batch(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // z = [z_w | z_l], optimized jointly
    let mut z = sample_prior(config.prior, d, config.seed ^ 0x57);
    z.extend(sample_prior(config.prior, d, config.seed ^ 0x1A));
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), 2 * d);
    let mut loss_history = Vec::with_capacity(config.n_adapt);

    for step in 0..config.n_adapt {
        let picks: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..pairs.len()))
            .collect();
        let ks: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..schedule.steps()))
            .collect();
        let eps: Vec<Array2<f64>> = (0..batch)
            .map(|_| Array2::from_shape_simple_fn((h, c), || StandardNormal.sample(&mut rng)))
            .collect();
        let items: Vec<InversionItem> = (0..batch)
            .map(|i| InversionItem {
                winner: pairs[picks[i]].winner.view(),
                loser: pairs[picks[i]].loser.view(),
                k: ks[i],
                eps: eps[i].view(),
            })
            .collect();
        let g = inversion_loss_and_grads(&net, schedule, &items, &z[..d], &z[d..])?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "inversion loss".into(),
            });
        }
        let grads: Vec<f64> = g.z_w.into_iter().chain(g.z_l).collect();
        adam.step(&mut z, &grads);
        z.iter_mut().for_each(|v| *v = clamp_ple(*v));
        loss_history.push(g.loss);
        observer(InversionStep {
            step: step + 1,
            loss: g.loss,
            z_w: &z[..d],
            z_l: &z[d..],
        });
    }
    let z_l = z.split_off(d);
    Ok(Inversion {
        z_w: z,
        z_l,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_and_grads, DenoiserConfig, TrainItem};

    fn small() -> DenoiserParams {
        DenoiserParams::init(&DenoiserConfig {
            horizon: 8,
            ple_dim: 4,
            hidden_width: 8,
            n_blocks: 1,
            seed: 3,
            ..DenoiserConfig::default()
        })
        .unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    fn pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
        (0..n as u64)
            .map(|i| PreferencePair {
                winner: random(8, 4, seed + 2 * i),
                loser: random(8, 4, seed + 2 * i + 1),
            })
            .collect()
    }

    #[test]
    fn central_mask_hides_half() {
        let m = Mask::central(64).unwrap();
        assert_eq!(m.hidden_window(), 16..48);
        assert_eq!(m.n_visible(), 32);
        assert_eq!(m.segment_starts(16).unwrap(), 16..33);
        let odd = Mask::central(7).unwrap();
        assert_eq!(odd.hidden_window().len(), 4);
        assert!(Mask::central(1).is_err());
        assert!(m.segment_starts(33).is_err());
    }

    #[test]
    fn zero_mapper_gives_half() {
        let m = MapperParams::new(
            Array2::zeros((4, 3)),
            Array1::zeros(3),
            Mask::central(10).unwrap(),
        )
        .unwrap();
        assert_eq!(m.map(random(10, 4, 0).view()).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn identical_visible_rows_match_single_row_mapping() {
        let mask = Mask::central(6).unwrap();
        let m =
            MapperParams::new(random(4, 3, 1), random(1, 3, 2).row(0).to_owned(), mask).unwrap();
        let row = random(1, 4, 3);
        let full = Array2::from_shape_fn((6, 4), |(_, j)| row[[0, j]]);
        let pre = row.row(0).dot(&m.weight) + &m.bias;
        let single: Vec<f64> = pre.iter().map(|&p| sigmoid(p)).collect();
        for (a, b) in m.map(full.view()).unwrap().iter().zip(&single) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn visible_permutation_and_hidden_content_invariance() {
        let mask = Mask::central(8).unwrap();
        let m = MapperParams::new(random(4, 5, 1), Array1::zeros(5), mask).unwrap();
        let full = random(8, 4, 9);
        let z = m.map(full.view()).unwrap();

        let mut hidden_changed = full.clone();
        for t in m.mask.hidden_window() {
            hidden_changed.row_mut(t).fill(1e6);
        }
        assert_eq!(z, m.map(hidden_changed.view()).unwrap());

        let mut permuted = full.clone();
        let vis: Vec<usize> = (0..8).filter(|&t| m.mask.visible()[t]).collect();
        for (i, &t) in vis.iter().enumerate() {
            permuted
                .row_mut(t)
                .assign(&full.row(vis[vis.len() - 1 - i]));
        }
        for (a, b) in z.iter().zip(m.map(permuted.view()).unwrap()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mapper_backward_matches_finite_differences() {
        let mask = Mask::central(6).unwrap();
        let mut m =
            MapperParams::new(random(4, 3, 4), random(1, 3, 5).row(0).to_owned(), mask).unwrap();
        let full = random(6, 4, 6);
        let probe = [0.3, -1.1, 0.7];
        let f = |m: &MapperParams, x: &Array2<f64>| -> f64 {
            m.map(x.view())
                .unwrap()
                .iter()
                .zip(&probe)
                .map(|(z, p)| z * p)
                .sum()
        };
        let tape = m.forward(full.view()).unwrap();
        let g = m.backward(full.view(), &tape, &probe);
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let w0 = m.weight[[i, j]];
                m.weight[[i, j]] = w0 + h;
                let up = f(&m, &full);
                m.weight[[i, j]] = w0 - h;
                let dn = f(&m, &full);
                m.weight[[i, j]] = w0;
                assert!(((up - dn) / (2.0 * h) - g.weight[[i, j]]).abs() < 1e-8);
            }
        }
        for j in 0..3 {
            let b0 = m.bias[j];
            m.bias[j] = b0 + h;
            let up = f(&m, &full);
            m.bias[j] = b0 - h;
            let dn = f(&m, &full);
            m.bias[j] = b0;
            assert!(((up - dn) / (2.0 * h) - g.bias[j]).abs() < 1e-8);
        }
        for t in 0..6 {
            for j in 0..4 {
                let mut x = full.clone();
                x[[t, j]] += h;
                let up = f(&m, &x);
                x[[t, j]] -= 2.0 * h;
                let dn = f(&m, &x);
                assert!(((up - dn) / (2.0 * h) - g.input[[t, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn prior_statistics() {
        assert!(sample_prior(PriorSpec::FixedHalf, 16, 3)
            .iter()
            .all(|&v| v == 0.5));
        let u = sample_prior(PriorSpec::Uniform01, 100_000, 1);
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        let g = sample_prior(PriorSpec::GaussianHalf, 100_000, 2);
        let gm = g.iter().sum::<f64>() / g.len() as f64;
        let sd = (g.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
        assert!((sd - 1.0 / 6.0).abs() < 0.01, "{sd}");
        for p in PriorSpec::ALL {
            assert!(sample_prior(p, 1000, 5)
                .iter()
                .all(|&v| (PLE_MIN..=PLE_MAX).contains(&v)));
            assert_eq!(sample_prior(p, 8, 5), sample_prior(p, 8, 5));
        }
    }

    #[test]
    fn prior_names_round_trip() {
        for p in PriorSpec::ALL {
            assert_eq!(p.name().parse::<PriorSpec>().unwrap(), p);
            assert_eq!(
                serde_json::to_string(&p).unwrap(),
                format!("\"{}\"", p.name())
            );
        }
    }

    #[test]
    fn joint_gradients_separate_into_terms() {
        let params = small();
        let net = Denoiser::new(&params);
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let ps = pairs(3, 10);
        let eps: Vec<_> = (0..3).map(|i| random(8, 4, 100 + i)).collect();
        let ks = [2, 11, 19];
        let items: Vec<_> = (0..3)
            .map(|i| InversionItem {
                winner: ps[i].winner.view(),
                loser: ps[i].loser.view(),
                k: ks[i],
                eps: eps[i].view(),
            })
            .collect();
        let (z_w, z_l) = (vec![0.2, 0.7, 0.4, 0.9], vec![0.6, 0.1, 0.5, 0.3]);
        let joint = inversion_loss_and_grads(&net, &schedule, &items, &z_w, &z_l).unwrap();

        let term = |side: &dyn Fn(&PreferencePair) -> ArrayView2<'_, f64>, z: &[f64]| {
            let batch: Vec<_> = (0..3)
                .map(|i| TrainItem {
                    tau_0: side(&ps[i]),
                    k: ks[i],
                    eps: eps[i].view(),
                    ctx: Context::Embedding(z),
                })
                .collect();
            let lg = loss_and_grads(&params, &schedule, &batch).unwrap();
            let mut g = vec![0.0; 4];
            for row in &lg.grad_ctx {
                g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            (lg.loss, g)
        };
        let (lw, gw) = term(&|p| p.winner.view(), &z_w);
        let (ll, gl) = term(&|p| p.loser.view(), &z_l);
        assert!((joint.loss - (lw + ll)).abs() < 1e-12 * joint.loss);
        for (a, b) in joint.z_w.iter().zip(&gw).chain(joint.z_l.iter().zip(&gl)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }

        // moving z_l leaves the z_w gradient unchanged
        let moved = inversion_loss_and_grads(&net, &schedule, &items, &z_w, &[0.9; 4]).unwrap();
        for (a, b) in moved.z_w.iter().zip(&joint.z_w) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn inversion_keeps_theta_and_bounds() {
        let params = small();
        let before: Vec<u64> = params.as_slice().iter().map(|v| v.to_bits()).collect();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let config = InversionConfig {
            n_adapt: 60,
            learning_rate: 0.2,
            ..InversionConfig::default()
        };
        let mut seen = 0;
        let inv = invert_preferences_with(&params, &schedule, &pairs(5, 0), &config, |s| {
            seen += 1;
            assert_eq!(s.step, seen);
            assert!(in_bounds(s.z_w) && in_bounds(s.z_l));
        })
        .unwrap();
        assert_eq!(seen, 60);
        assert_eq!(inv.loss_history.len(), 60);
        assert!(in_bounds(&inv.z_w) && in_bounds(&inv.z_l));
        let after: Vec<u64> = params.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        let again = invert_preferences(&params, &schedule, &pairs(5, 0), &config).unwrap();
        assert_eq!(inv, again);
    }

    #[test]
    fn identical_segments_give_no_separation_signal() {
        let params = small();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let same: Vec<_> = pairs(4, 7)
            .into_iter()
            .map(|p| PreferencePair {
                loser: p.winner.clone(),
                winner: p.winner,
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for seed in [0u64, 1] {
            let config = InversionConfig {
                n_adapt: 100,
                seed,
                ..InversionConfig::default()
            };
            let inv = invert_preferences(&params, &schedule, &same, &config).unwrap();
            let z0w = sample_prior(config.prior, 4, seed ^ 0x57);
            let z0l = sample_prior(config.prior, 4, seed ^ 0x1A);
            let init = dist(&z0w, &z0l).max(1e-3);
            assert!(dist(&inv.z_w, &inv.z_l) <= 10.0 * init);
        }
        // a shared fixed start stays shared: both latents see identical gradients
        let fixed = InversionConfig {
            n_adapt: 50,
            prior: PriorSpec::FixedHalf,
            ..InversionConfig::default()
        };
        let inv = invert_preferences(&params, &schedule, &same, &fixed).unwrap();
        assert_eq!(inv.z_w, inv.z_l);
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = small();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let zero = InversionConfig {
            n_adapt: 0,
            ..InversionConfig::default()
        };
        assert!(matches!(
            invert_preferences(&params, &schedule, &pairs(2, 0), &zero),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            invert_preferences(&params, &schedule, &[], &InversionConfig::default()),
            Err(Error::Empty(_))
        ));
        let bad = vec![PreferencePair {
            winner: random(7, 4, 0),
            loser: random(8, 4, 1),
        }];
        assert!(matches!(
            invert_preferences(&params, &schedule, &bad, &InversionConfig::default()),
            Err(Error::Shape { .. })
        ));
    }
}

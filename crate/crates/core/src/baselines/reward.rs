//! Bradley-Terry reward model and classifier-guided sampling with it.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{
    silu, silu_grad, view2, view2_mut, Denoiser, DenoiserParams, Layout, LayoutBuilder,
};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::{ancestral_sample_batch, classifier_guided_predict, Constraint};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_HIDDEN: usize = 64;

/// `x -> 1` MLP with two SiLU hidden layers over a flattened segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    horizon: usize,
    transition_dim: usize,
    hidden: usize,
    layout: Layout,
    flat: Vec<f64>,
}

struct RewardTape {
    x: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
}

fn reward_layout(input: usize, hidden: usize) -> Layout {
    let mut b = LayoutBuilder::default();
    b.push("l1.w", &[input, hidden]);
    b.push("l1.b", &[hidden]);
    b.push("l2.w", &[hidden, hidden]);
    b.push("l2.b", &[hidden]);
    b.push("out.w", &[hidden, 1]);
    b.push("out.b", &[1]);
    b.finish()
}

/// `-ln sigmoid(x)`, stable for large `|x|`.
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RewardModel {
    pub fn init(horizon: usize, transition_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if horizon == 0 || transition_dim == 0 || hidden == 0 {
            return Err(Error::Config(
                "reward model dimensions must be positive".into(),
            ));
        }
        let layout = reward_layout(horizon * transition_dim, hidden);
        let mut flat = vec![0.0; layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in layout.entries().iter().filter(|e| e.is_matrix()) {
            let normal = Normal::new(0.0, 1.0 / (e.shape[0] as f64).sqrt()).expect("std");
            flat[e.range()]
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(Self {
            horizon,
            transition_dim,
            hidden,
            layout,
            flat,
        })
    }

    pub fn from_parts(
        horizon: usize,
        transition_dim: usize,
        hidden: usize,
        flat: Vec<f64>,
    ) -> Result<Self> {
        let layout = reward_layout(horizon * transition_dim, hidden);
        if flat.len() != layout.total_len() {
            return Err(Error::shape(
                "reward parameters",
                layout.total_len(),
                flat.len(),
            ));
        }
        Ok(Self {
            horizon,
            transition_dim,
            hidden,
            layout,
            flat,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transition_dim(&self) -> usize {
        self.transition_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    fn w(&self, name: &str) -> ArrayView2<'_, f64> {
        view2(&self.flat, self.layout.entry(name))
    }

    fn b(&self, name: &str) -> ndarray::ArrayView1<'_, f64> {
        ndarray::ArrayView1::from(&self.flat[self.layout.entry(name).range()])
    }

    /// Stacked `n * H x C` rows to `n x (H * C)`.
    fn flatten(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (h, c) = (self.horizon, self.transition_dim);
        if rows.ncols() != c {
            return Err(Error::shape("transition dim (columns)", c, rows.ncols()));
        }
        if !rows.nrows().is_multiple_of(h) || rows.nrows() == 0 {
            return Err(Error::shape(
                "batch rows (multiple of horizon)",
                h,
                rows.nrows(),
            ));
        }
        Ok(rows
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows.nrows() / h, h * c))
            .expect("contiguous"))
    }

    fn forward(&self, x: Array2<f64>) -> (Array1<f64>, RewardTape) {
        let a1 = x.dot(&self.w("l1.w")) + self.b("l1.b");
        let a2 = a1.mapv(silu).dot(&self.w("l2.w")) + self.b("l2.b");
        let r = a2.mapv(silu).dot(&self.w("out.w")).column(0).to_owned()
            + self.flat[self.layout.entry("out.b").offset];
        (r, RewardTape { x, a1, a2 })
    }

    /// Gradients for `dr = d loss / d reward`: parameters and inputs.
    fn backward(
        &self,
        tape: &RewardTape,
        dr: &Array1<f64>,
        want_params: bool,
    ) -> (Option<Vec<f64>>, Array2<f64>) {
        let dr2 = dr.view().insert_axis(Axis(1));
        let h2 = tape.a2.mapv(silu);
        let da2 = dr2.dot(&self.w("out.w").t()) * tape.a2.mapv(silu_grad);
        let h1 = tape.a1.mapv(silu);
        let da1 = da2.dot(&self.w("l2.w").t()) * tape.a1.mapv(silu_grad);
        let dx = da1.dot(&self.w("l1.w").t());
        let grads = want_params.then(|| {
            let mut g = vec![0.0; self.flat.len()];
            let l = &self.layout;
            view2_mut(&mut g, l.entry("out.w")).assign(&h2.t().dot(&dr2));
            g[l.entry("out.b").offset] = dr.sum();
            view2_mut(&mut g, l.entry("l2.w")).assign(&h1.t().dot(&da2));
            g[l.entry("l2.b").range()]
                .copy_from_slice(da2.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            view2_mut(&mut g, l.entry("l1.w")).assign(&tape.x.t().dot(&da1));
            g[l.entry("l1.b").range()]
                .copy_from_slice(da1.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            g
        });
        (grads, dx)
    }

    /// Reward of every trajectory in stacked `n * H x C` rows.
    pub fn rewards(&self, rows: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(self.flatten(rows)?).0)
    }

    pub fn reward(&self, segment: ArrayView2<f64>) -> Result<f64> {
        Ok(self.rewards(segment)?[0])
    }

    /// Gradient of each trajectory's reward with respect to its own rows.
    pub fn input_grad(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (r, tape) = self.forward(self.flatten(rows)?);
        let (_, dx) = self.backward(&tape, &Array1::ones(r.len()), false);
        Ok(dx
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(rows.dim())
            .expect("same size"))
    }

    /// Mean Bradley-Terry loss over `pairs` and its parameter gradient.
    pub fn bt_loss_and_grads(&self, pairs: &[&PreferencePair]) -> Result<(f64, Vec<f64>)> {
        if pairs.is_empty() {
            return Err(Error::Empty("preference pairs".into()));
        }
        let n = pairs.len();
        let rows = crate::model::stack(
            pairs
                .iter()
                .map(|p| p.winner.view())
                .chain(pairs.iter().map(|p| p.loser.view())),
        );
        let (r, tape) = self.forward(self.flatten(rows.view())?);
        let mut loss = 0.0;
        let mut dr = Array1::zeros(2 * n);
        for i in 0..n {
            let m = r[i] - r[n + i];
            loss += neg_log_sigmoid(m);
            // d/dm of -ln sigmoid(m) = sigmoid(m) - 1
            let d = (sigmoid(m) - 1.0) / n as f64;
            dr[i] = d;
            dr[n + i] = -d;
        }
        let (g, _) = self.backward(&tape, &dr, true);
        Ok((loss / n as f64, g.expect("requested")))
    }

    /// Fraction of pairs whose winner gets the strictly higher reward.
    pub fn accuracy(&self, pairs: &[&PreferencePair]) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let hits = pairs
            .iter()
            .map(|p| Ok(self.reward(p.winner.view())? > self.reward(p.loser.view())?))
            .collect::<Result<Vec<bool>>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64)
    }
}

/// `-ln sigmoid(r(winner) - r(loser))`.
pub fn bt_loss(rm: &RewardModel, winner: ArrayView2<f64>, loser: ArrayView2<f64>) -> Result<f64> {
    Ok(neg_log_sigmoid(rm.reward(winner)? - rm.reward(loser)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub n_updates: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Share of labels held out for the reported accuracy.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            n_updates: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            hidden: DEFAULT_HIDDEN,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainReport {
    pub train_accuracy: f64,
    /// `None` when too few labels exist to hold any out.
    pub holdout_accuracy: Option<f64>,
    pub loss_history: Vec<f64>,
}

/// Minimizes the mean Bradley-Terry loss; holds out a seeded share of labels.
pub fn train_reward_model(
    pairs: &[PreferencePair],
    config: &RewardTrainConfig,
) -> Result<(RewardModel, RewardTrainReport)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Empty("preference labels".into()))?;
    let (h, c) = first.winner.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if pairs.len() >= 5 {
        ((pairs.len() as f64 * config.holdout_fraction).floor() as usize).min(pairs.len() - 1)
    } else {
        0
    };
    let (held, train) = order.split_at(n_hold);
    let train: Vec<&PreferencePair> = train.iter().map(|&i| &pairs[i]).collect();
    let held: Vec<&PreferencePair> = held.iter().map(|&i| &pairs[i]).collect();

    let mut rm = RewardModel::init(h, c, config.hidden, config.seed ^ 0xBEEF)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), rm.flat.len());
    let batch = config.batch_size.clamp(1, train.len());
    let mut loss_history = Vec::with_capacity(config.n_updates);
    for step in 0..config.n_updates {
        let picks: Vec<&PreferencePair> = if batch == train.len() {
            train.clone()
        } else {
            (0..batch)
                .map(|_| train[rng.random_range(0..train.len())])
                .collect()
        };
        let (loss, g) = rm.bt_loss_and_grads(&picks)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "reward-model loss".into(),
            });
        }
        adam.step(&mut rm.flat, &g);
        loss_history.push(loss);
    }
    let report = RewardTrainReport {
        train_accuracy: rm.accuracy(&train)?,
        holdout_accuracy: (!held.is_empty()).then(|| rm.accuracy(&held)).transpose()?,
        loss_history,
    };
    Ok((rm, report))
}

/// Null-context ancestral sampling steered by the reward gradient.
pub fn guided_sample(
    frozen: &DenoiserParams,
    rm: &RewardModel,
    schedule: &NoiseSchedule,
    v: f64,
    n: usize,
    seed: u64,
    constraints: &[Constraint],
) -> Result<Vec<Array2<f64>>> {
    let cfg = frozen.config();
    if rm.horizon != cfg.horizon || rm.transition_dim != cfg.transition_dim() {
        return Err(Error::shape(
            "reward model input",
            cfg.horizon * cfg.transition_dim(),
            rm.horizon * rm.transition_dim,
        ));
    }
    let net = Denoiser::new(frozen);
    ancestral_sample_batch(
        |x, k| classifier_guided_predict(&net, x, k, |x| rm.input_grad(x), v, schedule),
        schedule,
        n,
        cfg.horizon,
        cfg.transition_dim(),
        seed,
        constraints,
    )
}

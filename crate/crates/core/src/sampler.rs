//! Ancestral sampling and the guidance rules that shape its noise predictions.

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Context, Denoiser};
use crate::schedule::NoiseSchedule;

/// Guidance strength `v` and loser influence `u`. Stored verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceWeights {
    pub v: f64,
    pub u: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { v: 1.2, u: 0.02 }
    }
}

/// A pinned trajectory entry, re-imposed after every denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub t: usize,
    pub dim: usize,
    pub value: f64,
}

impl Constraint {
    /// Pins every state dimension of timestep 0 to `state`.
    pub fn initial_state(state: &[f64]) -> Vec<Constraint> {
        state
            .iter()
            .enumerate()
            .map(|(dim, &value)| Constraint { t: 0, dim, value })
            .collect()
    }
}

fn apply_constraints(x: &mut Array2<f64>, horizon: usize, constraints: &[Constraint]) {
    let n = x.nrows() / horizon;
    for i in 0..n {
        for c in constraints {
            x[[i * horizon + c.t, c.dim]] = c.value;
        }
    }
}

/// Draws `n` trajectories of shape `horizon x dim` by iterating the reverse
/// chain from `k = K-1` down to `0`:
///
/// `x_{k-1} = (x_k - (1 - a_k) / sqrt(1 - ab_k) * eps) / sqrt(a_k) + sigma_k z`
///
/// with the posterior `sigma_k` and `z = 0` at the last step. `predict`
/// receives the whole batch in row-block layout.
pub fn ancestral_sample_batch<F>(
    mut predict: F,
    schedule: &NoiseSchedule,
    n: usize,
    horizon: usize,
    dim: usize,
    seed: u64,
    constraints: &[Constraint],
) -> Result<Vec<Array2<f64>>>
where
    F: FnMut(ArrayView2<f64>, usize) -> Result<Array2<f64>>,
{
    if n == 0 {
        return Ok(Vec::new());
    }
    if let Some(c) = constraints.iter().find(|c| c.t >= horizon || c.dim >= dim) {
        return Err(Error::Config(format!(
            "constraint at ({}, {}) outside {horizon} x {dim}",
            c.t, c.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x =
        Array2::from_shape_simple_fn((n * horizon, dim), || StandardNormal.sample(&mut rng));
    apply_constraints(&mut x, horizon, constraints);

    for k in (0..schedule.steps()).rev() {
        let eps = predict(x.view(), k)?;
        if eps.dim() != x.dim() {
            return Err(Error::shape(
                "noise prediction rows",
                x.nrows(),
                eps.nrows(),
            ));
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k,
                what: "noise prediction".into(),
            });
        }
        let a = schedule.alpha()[k];
        let ab = schedule.alpha_bar()[k];
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        let sigma = schedule.posterior_std(k);
        Zip::from(&mut x).and(&eps).for_each(|x, &e| {
            *x = inv_sqrt_a * (*x - coef * e);
        });
        if k > 0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        apply_constraints(&mut x, horizon, constraints);
    }
    Ok(x.outer_iter()
        .collect::<Vec<_>>()
        .chunks(horizon)
        .map(|rows| {
            let mut m = Array2::zeros((horizon, dim));
            for (t, r) in rows.iter().enumerate() {
                m.row_mut(t).assign(r);
            }
            m
        })
        .collect())
}

/// Single-trajectory form of [`ancestral_sample_batch`].
pub fn ancestral_sample<F>(
    mut predict: F,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    seed: u64,
    constraints: &[Constraint],
) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<f64>, usize) -> Result<Array2<f64>>,
{
    let mut out = ancestral_sample_batch(
        &mut predict,
        schedule,
        1,
        shape.0,
        shape.1,
        seed,
        constraints,
    )?;
    Ok(out.pop().expect("one sample"))
}

/// `(1 + v) cond - v null`.
pub fn cfg_combine(cond: &Array2<f64>, null: &Array2<f64>, v: f64) -> Array2<f64> {
    let mut out = Array2::zeros(cond.dim());
    Zip::from(&mut out)
        .and(cond)
        .and(null)
        .for_each(|o, &c, &n| *o = (1.0 + v) * c - v * n);
    out
}

/// `(1 + v) [(1 + u) w - u l] - v null`.
pub fn dual_cfg_combine(
    winner: &Array2<f64>,
    loser: &Array2<f64>,
    null: &Array2<f64>,
    weights: GuidanceWeights,
) -> Array2<f64> {
    let mut out = Array2::zeros(winner.dim());
    let GuidanceWeights { v, u } = weights;
    Zip::from(&mut out)
        .and(winner)
        .and(loser)
        .and(null)
        .for_each(|o, &w, &l, &n| {
            let mixed = (1.0 + u) * w - u * l;
            *o = (1.0 + v) * mixed - v * n;
        });
    out
}

/// `eps - sqrt(1 - ab_k) * v * grad`.
pub fn classifier_guided_combine(
    eps: &Array2<f64>,
    grad: &Array2<f64>,
    alpha_bar: f64,
    v: f64,
) -> Array2<f64> {
    let scale = (1.0 - alpha_bar).sqrt() * v;
    let mut out = Array2::zeros(eps.dim());
    Zip::from(&mut out)
        .and(eps)
        .and(grad)
        .for_each(|o, &e, &g| *o = e - scale * g);
    out
}

fn batch_len(net: &Denoiser<'_>, x: ArrayView2<f64>) -> Result<usize> {
    let h = net.params().config().horizon;
    if !x.nrows().is_multiple_of(h) || x.nrows() == 0 {
        return Err(Error::shape(
            "batch rows (multiple of horizon)",
            h,
            x.nrows(),
        ));
    }
    Ok(x.nrows() / h)
}

/// Prediction for a batch sharing one step and one context.
pub fn predict_with(
    net: &Denoiser<'_>,
    x: ArrayView2<f64>,
    k: usize,
    ctx: Context<'_>,
) -> Result<Array2<f64>> {
    let n = batch_len(net, x)?;
    net.predict(x, &vec![k; n], &vec![ctx; n])
}

/// Classifier-free guidance against the learned null context.
pub fn cfg_predict(
    net: &Denoiser<'_>,
    x: ArrayView2<f64>,
    k: usize,
    z: &[f64],
    v: f64,
) -> Result<Array2<f64>> {
    let cond = predict_with(net, x, k, Context::Embedding(z))?;
    let null = predict_with(net, x, k, Context::Null)?;
    Ok(cfg_combine(&cond, &null, v))
}

/// Dual guidance: pushes away from the loser embedding, then applies
/// classifier-free guidance against the null context.
pub fn dual_cfg_predict(
    net: &Denoiser<'_>,
    x: ArrayView2<f64>,
    k: usize,
    z_w: &[f64],
    z_l: &[f64],
    weights: GuidanceWeights,
) -> Result<Array2<f64>> {
    let w = predict_with(net, x, k, Context::Embedding(z_w))?;
    let l = predict_with(net, x, k, Context::Embedding(z_l))?;
    let null = predict_with(net, x, k, Context::Null)?;
    Ok(dual_cfg_combine(&w, &l, &null, weights))
}

/// Classifier guidance on the null-context prediction; `reward_grad` returns
/// the gradient of the guiding score with respect to the noisy batch.
pub fn classifier_guided_predict<G>(
    net: &Denoiser<'_>,
    x: ArrayView2<f64>,
    k: usize,
    mut reward_grad: G,
    v: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>>
where
    G: FnMut(ArrayView2<f64>) -> Result<Array2<f64>>,
{
    let eps = predict_with(net, x, k, Context::Null)?;
    let grad = reward_grad(x)?;
    if grad.dim() != x.dim() {
        return Err(Error::shape(
            "reward gradient rows",
            x.nrows(),
            grad.nrows(),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: k,
            what: "reward gradient".into(),
        });
    }
    Ok(classifier_guided_combine(
        &eps,
        &grad,
        schedule.alpha_bar()[k],
        v,
    ))
}

/// How a sampling run conditions the denoiser.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// Null context only.
    Unconditional,
    /// Plain conditional prediction, no guidance.
    Conditional(&'a [f64]),
    Cfg {
        z: &'a [f64],
        v: f64,
    },
    Dual {
        z_w: &'a [f64],
        z_l: &'a [f64],
        weights: GuidanceWeights,
    },
}

/// Draws `n` trajectories (model units) under `guidance`.
pub fn sample_guided(
    net: &Denoiser<'_>,
    schedule: &NoiseSchedule,
    guidance: Guidance<'_>,
    n: usize,
    seed: u64,
    constraints: &[Constraint],
) -> Result<Vec<Array2<f64>>> {
    let cfg = net.params().config();
    let predict = |x: ArrayView2<f64>, k: usize| match guidance {
        Guidance::Unconditional => predict_with(net, x, k, Context::Null),
        Guidance::Conditional(z) => predict_with(net, x, k, Context::Embedding(z)),
        Guidance::Cfg { z, v } => cfg_predict(net, x, k, z, v),
        Guidance::Dual { z_w, z_l, weights } => dual_cfg_predict(net, x, k, z_w, z_l, weights),
    };
    ancestral_sample_batch(
        predict,
        schedule,
        n,
        cfg.horizon,
        cfg.transition_dim(),
        seed,
        constraints,
    )
}

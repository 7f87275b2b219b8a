//! Preference finetuning of the denoiser itself, on all weights or through
//! low-rank adapters.
//!
//! The objective compares per-segment denoising errors of the trained and a
//! frozen reference model under a shared `(k, eps)`:
//!
//! `L = -ln sigmoid(-beta * ((l(w) - l_ref(w)) - (l(l) - l_ref(l))))`
//!
//! where `l(x)` is the mean squared noise-prediction error on segment `x`.
//! Conditioning is the null context throughout.

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lora::{LowRankSet, DEFAULT_TARGETS};
use crate::env::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{check_traj, stack, Context, Denoiser, DenoiserParams, GradRequest};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::schedule::{forward_noise_rows, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub n_updates: usize,
    /// Defaults to `min(16, number of labels)`.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub beta: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub rank: usize,
    /// Kernel-name globs receiving adapters.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            n_updates: 5000,
            batch_size: None,
            learning_rate: 1e-4,
            beta: 5000.0,
            grad_clip: 1.0,
            rank: 8,
            targets: DEFAULT_TARGETS.iter().map(|t| t.to_string()).collect(),
            seed: 0,
        }
    }
}

/// One labeled pair with its shared noise draw.
#[derive(Debug, Clone, Copy)]
pub struct PreferenceItem<'a> {
    pub winner: ArrayView2<'a, f64>,
    pub loser: ArrayView2<'a, f64>,
    pub k: usize,
    pub eps: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct PreferenceGrads {
    pub loss: f64,
    /// In the parameter layout when requested.
    pub params: Option<Vec<f64>>,
    /// In the adapter layout when requested.
    pub adapters: Option<Vec<f64>>,
}

/// Per-segment mean squared errors of `pred` against `eps`, in row blocks.
fn segment_errors(pred: &Array2<f64>, eps: &Array2<f64>, h: usize) -> Vec<f64> {
    let per = (h * pred.ncols()) as f64;
    (0..pred.nrows() / h)
        .map(|i| {
            let rows = s![i * h..(i + 1) * h, ..];
            let mut acc = 0.0;
            Zip::from(pred.slice(rows))
                .and(eps.slice(rows))
                .for_each(|&p, &e| acc += (p - e) * (p - e));
            acc / per
        })
        .collect()
}

/// Batch-mean preference loss of `net` against `reference` and its gradient.
pub fn preference_loss_and_grads(
    net: &Denoiser<'_>,
    reference: &Denoiser<'_>,
    schedule: &NoiseSchedule,
    items: &[PreferenceItem<'_>],
    beta: f64,
    request: GradRequest,
) -> Result<PreferenceGrads> {
    if items.is_empty() {
        return Err(Error::Empty("preference batch".into()));
    }
    let cfg = net.params().config();
    let (h, c) = (cfg.horizon, cfg.transition_dim());
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
    let ctx = vec![Context::Null; 2 * b];
    let x = forward_noise_rows(tau0.view(), &ks, eps.view(), h, schedule);

    let (pred, tape) = net.forward(x.view(), &ks, &ctx)?;
    let ref_pred = reference.predict(x.view(), &ks, &ctx)?;
    let err = segment_errors(&pred, &eps, h);
    let ref_err = segment_errors(&ref_pred, &eps, h);

    let per = (h * c) as f64;
    let mut loss = 0.0;
    let mut dout = Array2::<f64>::zeros(pred.raw_dim());
    for i in 0..b {
        let diff = (err[i] - ref_err[i]) - (err[b + i] - ref_err[b + i]);
        let s = -beta * diff;
        // -ln sigmoid(s), stable
        loss += (-s).max(0.0) + (-s.abs()).exp().ln_1p();
        // dL/d err_w = beta * (1 - sigmoid(s)); dL/d err_l is its negative
        let g = beta * (1.0 - 1.0 / (1.0 + (-s).exp())) / b as f64;
        for (item, sign) in [(i, g), (b + i, -g)] {
            let rows = s![item * h..(item + 1) * h, ..];
            Zip::from(dout.slice_mut(rows))
                .and(pred.slice(rows))
                .and(eps.slice(rows))
                .for_each(|d, &p, &e| *d = sign * 2.0 * (p - e) / per);
        }
    }
    let grads = net.backward(&tape, &dout, request);
    Ok(PreferenceGrads {
        loss: loss / b as f64,
        params: grads.params,
        adapters: grads.adapters,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome<T> {
    pub model: T,
    pub loss_history: Vec<f64>,
    pub updates: usize,
}

/// Progress of one finetuning update.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneStep<'a> {
    /// Updates completed so far, starting at 1.
    pub step: usize,
    pub loss: f64,
    /// Current trainable vector (parameters or adapters).
    pub weights: &'a [f64],
}

fn draw_batch<'a>(
    rng: &mut ChaCha8Rng,
    pairs: &'a [PreferencePair],
    batch: usize,
    schedule: &NoiseSchedule,
    eps_store: &'a mut Vec<Array2<f64>>,
) -> Vec<PreferenceItem<'a>> {
    let (h, c) = pairs[0].winner.dim();
    let picks: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            (
                rng.random_range(0..pairs.len()),
                rng.random_range(0..schedule.steps()),
            )
        })
        .collect();
    *eps_store = (0..batch)
        .map(|_| Array2::from_shape_simple_fn((h, c), || StandardNormal.sample(rng)))
        .collect();
    picks
        .iter()
        .zip(eps_store.iter())
        .map(|(&(p, k), e)| PreferenceItem {
            winner: pairs[p].winner.view(),
            loser: pairs[p].loser.view(),
            k,
            eps: e.view(),
        })
        .collect()
}

fn validate(config: &FinetuneConfig) -> Result<()> {
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config(
            "finetune learning_rate must be positive".into(),
        ));
    }
    if !(config.beta >= 0.0) {
        return Err(Error::Config("finetune beta must be non-negative".into()));
    }
    Ok(())
}

/// Every parameter trainable. With no labels the base is returned unchanged
/// after zero updates.
pub fn finetune_full(
    base: &DenoiserParams,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    config: &FinetuneConfig,
    mut observer: impl FnMut(FinetuneStep<'_>),
) -> Result<FinetuneOutcome<DenoiserParams>> {
    validate(config)?;
    let mut model = base.clone();
    if pairs.is_empty() {
        return Ok(FinetuneOutcome {
            model,
            loss_history: Vec::new(),
            updates: 0,
        });
    }
    let batch = config.batch_size.unwrap_or(16.min(pairs.len())).max(1);
    let reference = Denoiser::new(base);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), model.len());
    let mut loss_history = Vec::with_capacity(config.n_updates);
    let mut eps_store = Vec::new();
    for step in 0..config.n_updates {
        let items = draw_batch(&mut rng, pairs, batch, schedule, &mut eps_store);
        let g = preference_loss_and_grads(
            &Denoiser::new(&model),
            &reference,
            schedule,
            &items,
            config.beta,
            GradRequest::PARAMS,
        )?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "finetune loss".into(),
            });
        }
        let mut grads = g.params.expect("requested");
        if config.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, config.grad_clip);
        }
        adam.step(model.as_mut_slice(), &grads);
        loss_history.push(g.loss);
        observer(FinetuneStep {
            step: step + 1,
            loss: g.loss,
            weights: model.as_slice(),
        });
    }
    Ok(FinetuneOutcome {
        model,
        updates: loss_history.len(),
        loss_history,
    })
}

/// Same objective as [`finetune_full`] with only the adapter factors trained.
pub fn finetune_lora(
    base: &DenoiserParams,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    config: &FinetuneConfig,
    mut observer: impl FnMut(FinetuneStep<'_>),
) -> Result<FinetuneOutcome<LowRankSet>> {
    validate(config)?;
    let mut set = LowRankSet::new(base, config.rank, &config.targets, config.seed ^ 0x10AA)?;
    if pairs.is_empty() {
        return Ok(FinetuneOutcome {
            model: set,
            loss_history: Vec::new(),
            updates: 0,
        });
    }
    let batch = config.batch_size.unwrap_or(16.min(pairs.len())).max(1);
    let reference = Denoiser::new(base);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), set.len());
    let mut loss_history = Vec::with_capacity(config.n_updates);
    let mut eps_store = Vec::new();
    for step in 0..config.n_updates {
        let items = draw_batch(&mut rng, pairs, batch, schedule, &mut eps_store);
        let g = preference_loss_and_grads(
            &Denoiser::with_adapters(base, &set),
            &reference,
            schedule,
            &items,
            config.beta,
            GradRequest::ADAPTERS,
        )?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "finetune loss".into(),
            });
        }
        let mut grads = g.adapters.expect("requested");
        if config.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, config.grad_clip);
        }
        adam.step(set.as_mut_slice(), &grads);
        loss_history.push(g.loss);
        observer(FinetuneStep {
            step: step + 1,
            loss: g.loss,
            weights: set.as_slice(),
        });
    }
    Ok(FinetuneOutcome {
        model: set,
        updates: loss_history.len(),
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;

    fn params(seed: u64) -> DenoiserParams {
        DenoiserParams::init(&DenoiserConfig {
            horizon: 4,
            ple_dim: 2,
            hidden_width: 8,
            n_blocks: 1,
            time_embed_dim: 8,
            seed,
            ..DenoiserConfig::default()
        })
        .unwrap()
    }

    fn random(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((4, 4), || StandardNormal.sample(&mut rng))
    }

    fn pairs(n: usize) -> Vec<PreferencePair> {
        (0..n as u64)
            .map(|i| PreferencePair {
                winner: random(2 * i),
                loser: random(2 * i + 1),
            })
            .collect()
    }

    fn items<'a>(ps: &'a [PreferencePair], eps: &'a [Array2<f64>]) -> Vec<PreferenceItem<'a>> {
        ps.iter()
            .zip(eps)
            .enumerate()
            .map(|(i, (p, e))| PreferenceItem {
                winner: p.winner.view(),
                loser: p.loser.view(),
                k: (3 * i + 1) % 10,
                eps: e.view(),
            })
            .collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = params(0);
        let mut model = base.clone();
        // move away from the reference so the loss is not at its symmetric point
        model
            .as_mut_slice()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0));
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let ps = pairs(3);
        let eps: Vec<_> = (0..3).map(|i| random(50 + i)).collect();
        let it = items(&ps, &eps);
        let beta = 3.0;
        let reference = Denoiser::new(&base);
        let loss = |m: &DenoiserParams| {
            preference_loss_and_grads(
                &Denoiser::new(m),
                &reference,
                &schedule,
                &it,
                beta,
                GradRequest::PARAMS,
            )
            .unwrap()
            .loss
        };
        let g = preference_loss_and_grads(
            &Denoiser::new(&model),
            &reference,
            &schedule,
            &it,
            beta,
            GradRequest::PARAMS,
        )
        .unwrap()
        .params
        .unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..60 {
            let i = rng.random_range(0..model.len());
            let x0 = model.as_slice()[i];
            model.as_mut_slice()[i] = x0 + h;
            let up = loss(&model);
            model.as_mut_slice()[i] = x0 - h;
            let dn = loss(&model);
            model.as_mut_slice()[i] = x0;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-8 + 1e-4 * g[i].abs(),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let base = params(2);
        let mut set = LowRankSet::new(&base, 2, &["blocks.*.w", "conv_out.w"], 4).unwrap();
        // nonzero B so gradients reach A as well
        set.as_mut_slice()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.02 * ((i % 5) as f64 - 2.0));
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let ps = pairs(2);
        let eps: Vec<_> = (0..2).map(|i| random(70 + i)).collect();
        let it = items(&ps, &eps);
        let reference = Denoiser::new(&base);
        let loss = |s: &LowRankSet| {
            preference_loss_and_grads(
                &Denoiser::with_adapters(&base, s),
                &reference,
                &schedule,
                &it,
                2.0,
                GradRequest::ADAPTERS,
            )
            .unwrap()
            .loss
        };
        let g = preference_loss_and_grads(
            &Denoiser::with_adapters(&base, &set),
            &reference,
            &schedule,
            &it,
            2.0,
            GradRequest::ADAPTERS,
        )
        .unwrap()
        .adapters
        .unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..60 {
            let i = rng.random_range(0..set.len());
            let x0 = set.as_slice()[i];
            set.as_mut_slice()[i] = x0 + h;
            let up = loss(&set);
            set.as_mut_slice()[i] = x0 - h;
            let dn = loss(&set);
            set.as_mut_slice()[i] = x0;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-8 + 1e-4 * g[i].abs(),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn small_beta_flattens_and_identical_pairs_cancel() {
        let base = params(1);
        let mut model = base.clone();
        model.as_mut_slice().iter_mut().for_each(|v| *v *= 1.01);
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let ps = pairs(3);
        let eps: Vec<_> = (0..3).map(|i| random(90 + i)).collect();
        let it = items(&ps, &eps);
        let reference = Denoiser::new(&base);
        let net = Denoiser::new(&model);
        let run = |beta: f64, it: &[PreferenceItem]| {
            preference_loss_and_grads(&net, &reference, &schedule, it, beta, GradRequest::PARAMS)
                .unwrap()
        };
        let big = norm(&run(1.0, &it).params.unwrap());
        let tiny = run(1e-9, &it);
        assert!((tiny.loss - std::f64::consts::LN_2).abs() < 1e-8);
        assert!(norm(&tiny.params.unwrap()) < 1e-8 * big);

        let same: Vec<_> = it
            .iter()
            .map(|i| PreferenceItem {
                loser: i.winner,
                ..*i
            })
            .collect();
        let tied = run(5000.0, &same);
        assert!((tied.loss - std::f64::consts::LN_2).abs() < 1e-12);
        // cancellation is exact up to summation order
        assert!(norm(&tied.params.unwrap()) < 1e-12 * big);
    }

    #[test]
    fn empty_labels_are_a_no_op() {
        let base = params(0);
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let out = finetune_full(&base, &schedule, &[], &FinetuneConfig::default(), |_| {
            panic!("no updates")
        })
        .unwrap();
        assert_eq!(out.updates, 0);
        assert_eq!(out.model, base);
    }

    #[test]
    fn full_and_lora_runs_are_deterministic() {
        let base = params(3);
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let config = FinetuneConfig {
            n_updates: 15,
            learning_rate: 1e-3,
            beta: 50.0,
            rank: 2,
            ..FinetuneConfig::default()
        };
        let ps = pairs(4);
        let a = finetune_full(&base, &schedule, &ps, &config, |_| {}).unwrap();
        let b = finetune_full(&base, &schedule, &ps, &config, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.updates, 15);
        assert_ne!(a.model, base);
        let la = finetune_lora(&base, &schedule, &ps, &config, |_| {}).unwrap();
        let lb = finetune_lora(&base, &schedule, &ps, &config, |_| {}).unwrap();
        assert_eq!(la, lb);
        // the first update sees B = 0, so the loss starts at ln 2
        assert!((la.loss_history[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn default_lora_is_a_small_fraction() {
        let base = DenoiserParams::init(&DenoiserConfig::default()).unwrap();
        let set = LowRankSet::new(&base, 8, DEFAULT_TARGETS, 0).unwrap();
        assert!(
            (set.len() as f64) < 0.1 * base.len() as f64,
            "{} vs {}",
            set.len(),
            base.len()
        );
    }
}

//! Joint pretraining of the denoiser and the trajectory mapper.

use ndarray::{s, Array2, ArrayView2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_traj, squared_error, stack, view2_mut, Context, Denoiser, DenoiserParams, GradRequest,
    LossGrads,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::ple::{MapperParams, Mask, MAPPER_BIAS, MAPPER_WEIGHT};
use crate::schedule::{forward_noise_rows, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub n_updates: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the mapped latent by the null context.
    pub context_dropout_p: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_updates: 20_000,
            batch_size: 32,
            learning_rate: 5e-3,
            context_dropout_p: 0.25,
            grad_clip: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.context_dropout_p) {
            return Err(Error::Config(format!(
                "context_dropout_p must lie in [0, 1], got {}",
                self.context_dropout_p
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "pretraining batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "pretraining learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One pretraining example: a segment cut from the hidden window of `full`.
#[derive(Debug, Clone, Copy)]
pub struct PretrainItem<'a> {
    /// `L x (S + A)`, normalized.
    pub full: ArrayView2<'a, f64>,
    pub start: usize,
    pub k: usize,
    pub eps: ArrayView2<'a, f64>,
    /// Condition on the null context instead of the mapped latent.
    pub dropped: bool,
}

/// Denoising loss of a batch conditioned on mapped latents, with gradients
/// flowing through the mapper into its parameter slots.
pub fn pretrain_loss_and_grads(
    params: &DenoiserParams,
    mask: &Mask,
    schedule: &NoiseSchedule,
    items: &[PretrainItem<'_>],
) -> Result<LossGrads> {
    if items.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let cfg = params.config();
    let (h, c) = (cfg.horizon, cfg.transition_dim());
    for it in items {
        check_traj(it.eps, h, c)?;
        schedule.check_step(it.k)?;
        if it.start + h > it.full.nrows() {
            return Err(Error::Config(format!(
                "segment {}..{} exceeds trajectory length {}",
                it.start,
                it.start + h,
                it.full.nrows()
            )));
        }
    }
    let mapper = MapperParams::from_params(params, mask.clone());
    let tapes: Vec<_> = items
        .iter()
        .map(|it| (!it.dropped).then(|| mapper.forward(it.full)).transpose())
        .collect::<Result<_>>()?;
    let ctx: Vec<Context> = tapes
        .iter()
        .map(|t| {
            t.as_ref()
                .map_or(Context::Null, |t| Context::Embedding(&t.z))
        })
        .collect();

    let tau0 = stack(
        items
            .iter()
            .map(|it| it.full.slice_move(s![it.start..it.start + h, ..])),
    );
    let eps = stack(items.iter().map(|it| it.eps));
    let ks: Vec<usize> = items.iter().map(|it| it.k).collect();
    let x = forward_noise_rows(tau0.view(), &ks, eps.view(), h, schedule);
    let net = Denoiser::new(params);
    let (pred, tape) = net.forward(x.view(), &ks, &ctx)?;
    let (loss, dout) = squared_error(&pred, &eps, items.len());
    let g = net.backward(&tape, &dout, GradRequest::PARAMS);
    let mut grad_params = g.params.expect("requested");

    let layout = params.layout();
    let mut dw = Array2::<f64>::zeros(mapper.weight.raw_dim());
    let mut db = ndarray::Array1::<f64>::zeros(mapper.ple_dim());
    for ((it, t), dz) in items.iter().zip(&tapes).zip(g.ctx.outer_iter()) {
        if let Some(t) = t {
            let mg = mapper.backward(it.full, t, dz.as_slice().expect("contiguous"));
            dw += &mg.weight;
            db += &mg.bias;
        }
    }
    view2_mut(&mut grad_params, layout.entry(MAPPER_WEIGHT)).scaled_add(1.0, &dw);
    grad_params[layout.entry(MAPPER_BIAS).range()]
        .iter_mut()
        .zip(&db)
        .for_each(|(a, b)| *a += b);
    Ok(LossGrads {
        loss,
        grad_params,
        grad_ctx: g.ctx.outer_iter().map(|r| r.to_vec()).collect(),
    })
}

/// Progress of one pretraining update.
#[derive(Debug, Clone, Copy)]
pub struct PretrainStep<'a> {
    /// Updates completed so far, starting at 1.
    pub step: usize,
    pub loss: f64,
    /// Gradient before clipping, in the parameter layout.
    pub grads: &'a [f64],
}

/// Trains `params` in place on normalized episodes; returns the loss curve.
pub fn pretrain(
    params: &mut DenoiserParams,
    episodes: &[Array2<f64>],
    mask: &Mask,
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
    seed: u64,
    mut observer: impl FnMut(PretrainStep<'_>),
) -> Result<Vec<f64>> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let cfg = params.config().clone();
    let (h, c) = (cfg.horizon, cfg.transition_dim());
    for ep in episodes {
        if ep.nrows() != mask.len() {
            return Err(Error::shape("episode length", mask.len(), ep.nrows()));
        }
        if ep.ncols() != c {
            return Err(Error::shape("transition dim (columns)", c, ep.ncols()));
        }
    }
    let starts = mask.segment_starts(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), params.len());
    let mut history = Vec::with_capacity(config.n_updates);
    for step in 0..config.n_updates {
        let eps: Vec<Array2<f64>> = (0..config.batch_size)
            .map(|_| Array2::from_shape_simple_fn((h, c), || StandardNormal.sample(&mut rng)))
            .collect();
        let items: Vec<PretrainItem> = eps
            .iter()
            .map(|e| PretrainItem {
                full: episodes[rng.random_range(0..episodes.len())].view(),
                start: rng.random_range(starts.clone()),
                k: rng.random_range(0..schedule.steps()),
                eps: e.view(),
                dropped: rng.random_bool(config.context_dropout_p),
            })
            .collect();
        let mut lg = pretrain_loss_and_grads(params, mask, schedule, &items)?;
        if !lg.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "pretraining loss".into(),
            });
        }
        observer(PretrainStep {
            step: step + 1,
            loss: lg.loss,
            grads: &lg.grad_params,
        });
        if config.grad_clip > 0.0 {
            clip_grad_norm(&mut lg.grad_params, config.grad_clip);
        }
        adam.step(params.as_mut_slice(), &lg.grad_params);
        history.push(lg.loss);
    }
    Ok(history)
}

//! Noise-prediction network `eps(tau_k, z, k)`.
//!
//! A residual stack of kernel-3 temporal convolutions over the horizon axis.
//! The diffusion step is embedded sinusoidally, concatenated with the context
//! embedding, passed through a two-layer MLP, and injected into every residual
//! block as a per-channel scale and shift. All parameters (including the
//! trajectory mapper and the learned null context) live in one flat `f64`
//! vector described by a [`Layout`].
//!
//! Forward and backward passes are batched: a batch of `B` trajectories is a
//! `(B * H, S + A)` matrix with trajectory `i` occupying rows `i*H..(i+1)*H`.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::lora::LowRankSet;
use crate::error::{Error, Result};
use crate::schedule::{forward_noise_rows, NoiseSchedule};

/// Default width of the sinusoidal step embedding.
pub const DEFAULT_TIME_EMBED_DIM: usize = 32;
/// Initial value of every null-context entry.
pub const NULL_CONTEXT_INIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub ple_dim: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            state_dim: 2,
            action_dim: 2,
            ple_dim: 16,
            hidden_width: 32,
            n_blocks: 2,
            time_embed_dim: DEFAULT_TIME_EMBED_DIM,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Width of one trajectory row, `S + A`.
    pub fn transition_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.horizon >= 2, "horizon must be >= 2"),
            (self.state_dim >= 1, "state_dim must be >= 1"),
            (self.action_dim >= 1, "action_dim must be >= 1"),
            (self.ple_dim >= 1, "ple_dim must be >= 1"),
            (self.hidden_width >= 1, "hidden_width must be >= 1"),
            (self.n_blocks >= 1, "n_blocks must be >= 1"),
            (
                self.time_embed_dim >= 4 && self.time_embed_dim.is_multiple_of(2),
                "time_embed_dim must be even and >= 4",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    /// Parameter layout in storage order. Dense and convolution kernels are
    /// stored `(fan_in, fan_out)`; a kernel-3 convolution over `c` channels
    /// has fan-in `3 * c` (taps `t-1, t, t+1`, each a block of `c` rows).
    pub fn layout(&self) -> Layout {
        let (c, w, e) = (self.transition_dim(), self.hidden_width, self.ple_dim);
        let t = self.time_embed_dim;
        let mut b = LayoutBuilder::default();
        b.push("time1.w", &[t + e, 4 * w]);
        b.push("time1.b", &[4 * w]);
        b.push("time2.w", &[4 * w, w]);
        b.push("time2.b", &[w]);
        b.push("conv_in.w", &[3 * c, w]);
        b.push("conv_in.b", &[w]);
        for i in 0..self.n_blocks {
            b.push(&format!("blocks.{i}.conv1.w"), &[3 * w, w]);
            b.push(&format!("blocks.{i}.conv1.b"), &[w]);
            b.push(&format!("blocks.{i}.film.w"), &[w, 2 * w]);
            b.push(&format!("blocks.{i}.film.b"), &[2 * w]);
            b.push(&format!("blocks.{i}.conv2.w"), &[3 * w, w]);
            b.push(&format!("blocks.{i}.conv2.b"), &[w]);
        }
        b.push("conv_out.w", &[3 * w, c]);
        b.push("conv_out.b", &[c]);
        b.push(MAPPER_WEIGHT, &[c, e]);
        b.push(MAPPER_BIAS, &[e]);
        b.push(NULL_CONTEXT, &[e]);
        b.finish()
    }
}

pub(crate) const MAPPER_WEIGHT: &str = "mapper.w";
pub(crate) const MAPPER_BIAS: &str = "mapper.b";
pub(crate) const NULL_CONTEXT: &str = "null_context";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bias vectors and the null context are 1-D; everything else is a kernel.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(name, shape, offset)` description of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn entry(&self, name: &str) -> &LayoutEntry {
        self.get(name)
            .unwrap_or_else(|| panic!("layout has no entry {name:?}"))
    }

    /// Checks offsets are contiguous and in order.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next || e.shape.is_empty() || e.shape.len() > 2 {
                return Err(Error::Format(format!("bad layout entry {:?}", e.name)));
            }
            next += e.len();
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
    next: usize,
}

impl LayoutBuilder {
    pub(crate) fn push(&mut self, name: &str, shape: &[usize]) {
        let entry = LayoutEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.next,
        };
        self.next += entry.len();
        self.entries.push(entry);
    }

    pub(crate) fn finish(self) -> Layout {
        Layout {
            entries: self.entries,
        }
    }
}

pub(crate) fn view2<'a>(flat: &'a [f64], e: &LayoutEntry) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((e.shape[0], e.shape[1]), &flat[e.range()]).expect("layout shape")
}

pub(crate) fn view2_mut<'a>(flat: &'a mut [f64], e: &LayoutEntry) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), &mut flat[e.range()]).expect("layout shape")
}

/// All learnable weights of the denoiser, the trajectory mapper and the null
/// context, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    layout: Layout,
    flat: Vec<f64>,
}

impl DenoiserParams {
    /// Deterministic in `config.seed`: kernels ~ N(0, 1/fan_in), biases zero,
    /// null context 0.5.
    pub fn init(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut flat = vec![0.0; layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for e in layout.entries() {
            if e.name == NULL_CONTEXT {
                flat[e.range()].fill(NULL_CONTEXT_INIT);
            } else if e.is_matrix() {
                let std = (1.0 / e.shape[0] as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                for v in &mut flat[e.range()] {
                    *v = dist.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            flat,
        })
    }

    pub fn from_parts(config: DenoiserConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if flat.len() != layout.total_len() {
            return Err(Error::shape(
                "parameter vector",
                layout.total_len(),
                flat.len(),
            ));
        }
        Ok(Self {
            config,
            layout,
            flat,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
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

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn null_context(&self) -> &[f64] {
        &self.flat[self.layout.entry(NULL_CONTEXT).range()]
    }

    pub fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        view2(&self.flat, self.layout.entry(name))
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.flat[self.layout.entry(name).range()])
    }
}

/// Conditioning input of a single prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Context<'a> {
    /// Resolved to the learned null context.
    Null,
    Embedding(&'a [f64]),
}

/// A single noise-prediction call on one trajectory.
pub fn denoise(
    params: &DenoiserParams,
    tau_k: ArrayView2<f64>,
    k: usize,
    ctx: Context<'_>,
) -> Result<Array2<f64>> {
    let h = params.config.horizon;
    if tau_k.nrows() != h {
        return Err(Error::shape("trajectory horizon (rows)", h, tau_k.nrows()));
    }
    Denoiser::new(params).predict(tau_k, &[k], &[ctx])
}

/// One training example for [`loss_and_grads`].
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub tau_0: ArrayView2<'a, f64>,
    pub k: usize,
    pub eps: ArrayView2<'a, f64>,
    pub ctx: Context<'a>,
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub grad_params: Vec<f64>,
    pub grad_ctx: Vec<Vec<f64>>,
}

/// Mean over the batch of `||eps - eps_theta(tau_k, ctx, k)||^2` and its exact
/// gradients. Gradients for null-context items also flow into the
/// `null_context` slot of `grad_params`.
pub fn loss_and_grads(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[TrainItem<'_>],
) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let cfg = &params.config;
    let (h, c) = (cfg.horizon, cfg.transition_dim());
    for item in batch {
        check_traj(item.tau_0, h, c)?;
        check_traj(item.eps, h, c)?;
        if item.k >= schedule.steps() {
            return Err(Error::Config(format!(
                "step {} >= {}",
                item.k,
                schedule.steps()
            )));
        }
    }
    let tau0 = stack(batch.iter().map(|i| i.tau_0));
    let eps = stack(batch.iter().map(|i| i.eps));
    let ks: Vec<usize> = batch.iter().map(|i| i.k).collect();
    let ctx: Vec<Context> = batch.iter().map(|i| i.ctx).collect();
    let x = forward_noise_rows(tau0.view(), &ks, eps.view(), h, schedule);

    let net = Denoiser::new(params);
    let (pred, tape) = net.forward(x.view(), &ks, &ctx)?;
    let (loss, dout) = squared_error(&pred, &eps, batch.len());
    let grads = net.backward(&tape, &dout, GradRequest::PARAMS);
    Ok(LossGrads {
        loss,
        grad_params: grads.params.expect("requested"),
        grad_ctx: grads.ctx.outer_iter().map(|r| r.to_vec()).collect(),
    })
}

/// `sum ||pred - target||^2 / n` and its derivative with respect to `pred`.
pub(crate) fn squared_error(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    n: usize,
) -> (f64, Array2<f64>) {
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let dout = diff * (2.0 / n as f64);
    (loss, dout)
}

pub(crate) fn check_traj(m: ArrayView2<f64>, h: usize, c: usize) -> Result<()> {
    if m.nrows() != h {
        return Err(Error::shape("trajectory horizon (rows)", h, m.nrows()));
    }
    if m.ncols() != c {
        return Err(Error::shape("transition dim (columns)", c, m.ncols()));
    }
    Ok(())
}

/// Vertically stacks trajectories into batch layout.
pub fn stack<'a>(items: impl Iterator<Item = ArrayView2<'a, f64>>) -> Array2<f64> {
    let views: Vec<_> = items.collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

/// Which gradients [`Denoiser::backward`] should accumulate. Context
/// gradients are always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub adapters: bool,
}

impl GradRequest {
    pub const CONTEXT_ONLY: Self = Self {
        params: false,
        adapters: false,
    };
    pub const PARAMS: Self = Self {
        params: true,
        adapters: false,
    };
    pub const ADAPTERS: Self = Self {
        params: false,
        adapters: true,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Flat, in the parameter layout.
    pub params: Option<Vec<f64>>,
    /// Flat, in the adapter layout.
    pub adapters: Option<Vec<f64>>,
    /// One row per batch item, `ple_dim` wide.
    pub ctx: Array2<f64>,
}

struct DenseTape {
    input: Array2<f64>,
    /// `input * B` for an adapted kernel.
    low_rank: Option<Array2<f64>>,
}

struct BlockTape {
    h_in: Array2<f64>,
    conv1: DenseTape,
    a1: Array2<f64>,
    film: Array2<f64>,
    film_tape: DenseTape,
    a2: Array2<f64>,
    conv2: DenseTape,
}

/// Activations recorded by [`Denoiser::forward`].
pub struct Tape {
    batch: usize,
    null_rows: Vec<bool>,
    time1: DenseTape,
    m1: Array2<f64>,
    time2: DenseTape,
    g: Array2<f64>,
    conv_in: DenseTape,
    blocks: Vec<BlockTape>,
    h_out: Array2<f64>,
    conv_out: DenseTape,
}

/// Evaluation handle over frozen parameters, optionally with low-rank
/// adapters applied on the fly.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    params: &'a DenoiserParams,
    adapters: Option<&'a LowRankSet>,
}

impl<'a> Denoiser<'a> {
    pub fn new(params: &'a DenoiserParams) -> Self {
        Self {
            params,
            adapters: None,
        }
    }

    pub fn with_adapters(params: &'a DenoiserParams, adapters: &'a LowRankSet) -> Self {
        Self {
            params,
            adapters: Some(adapters),
        }
    }

    pub fn params(&self) -> &'a DenoiserParams {
        self.params
    }

    /// Batched prediction without recording a tape.
    pub fn predict(
        &self,
        x: ArrayView2<f64>,
        steps: &[usize],
        ctx: &[Context<'_>],
    ) -> Result<Array2<f64>> {
        self.forward(x, steps, ctx).map(|(out, _)| out)
    }

    fn context_rows(&self, ctx: &[Context<'_>]) -> Result<(Array2<f64>, Vec<bool>)> {
        let d = self.params.config.ple_dim;
        let mut rows = Array2::zeros((ctx.len(), d));
        let mut null_rows = Vec::with_capacity(ctx.len());
        for (i, c) in ctx.iter().enumerate() {
            let z = match c {
                Context::Null => self.params.null_context(),
                Context::Embedding(z) => z,
            };
            if z.len() != d {
                return Err(Error::shape("context length", d, z.len()));
            }
            rows.row_mut(i).assign(&ArrayView1::from(z));
            null_rows.push(matches!(c, Context::Null));
        }
        Ok((rows, null_rows))
    }

    fn dense(&self, name: &str, input: Array2<f64>) -> (Array2<f64>, DenseTape) {
        let w = self.params.matrix(&format!("{name}.w"));
        let b = self.params.vector(&format!("{name}.b"));
        let mut y = input.dot(&w);
        y += &b;
        let low_rank = self
            .adapters
            .and_then(|set| set.factors(&format!("{name}.w")))
            .map(|(lb, la)| {
                let xb = input.dot(&lb);
                general_mat_mul(1.0, &xb, &la, 1.0, &mut y);
                xb
            });
        (y, DenseTape { input, low_rank })
    }

    fn dense_backward(
        &self,
        name: &str,
        tape: &DenseTape,
        dy: &Array2<f64>,
        sink: &mut GradSink,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let wname = format!("{name}.w");
        let w = self.params.matrix(&wname);
        if let Some(g) = sink.params.as_mut() {
            let layout = &self.params.layout;
            general_mat_mul(
                1.0,
                &tape.input.t(),
                dy,
                1.0,
                &mut view2_mut(g, layout.entry(&wname)),
            );
            let gb = &mut g[layout.entry(&format!("{name}.b")).range()];
            for row in dy.outer_iter() {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut low_rank_dx = None;
        if let (Some(set), Some(xb)) = (self.adapters, tape.low_rank.as_ref()) {
            let (lb, la) = set.factors(&wname).expect("adapter present at forward");
            let dxb = dy.dot(&la.t());
            if let Some(g) = sink.adapters.as_mut() {
                let (eb, ea) = set.entries(&wname).expect("adapter entries");
                general_mat_mul(1.0, &xb.t(), dy, 1.0, &mut view2_mut(g, ea));
                general_mat_mul(1.0, &tape.input.t(), &dxb, 1.0, &mut view2_mut(g, eb));
            }
            if need_input_grad {
                low_rank_dx = Some(dxb.dot(&lb.t()));
            }
        }
        need_input_grad.then(|| {
            let mut dx = dy.dot(&w.t());
            if let Some(extra) = low_rank_dx {
                dx += &extra;
            }
            dx
        })
    }

    /// Batched forward pass recording activations for [`Self::backward`].
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        steps: &[usize],
        ctx: &[Context<'_>],
    ) -> Result<(Array2<f64>, Tape)> {
        let cfg = &self.params.config;
        let (h, c, w) = (cfg.horizon, cfg.transition_dim(), cfg.hidden_width);
        let b = steps.len();
        if b == 0 {
            return Err(Error::Empty("prediction batch".into()));
        }
        if x.ncols() != c {
            return Err(Error::shape("transition dim (columns)", c, x.ncols()));
        }
        if x.nrows() != b * h {
            return Err(Error::shape(
                "batch rows (items x horizon)",
                b * h,
                x.nrows(),
            ));
        }
        if ctx.len() != b {
            return Err(Error::shape("contexts per batch", b, ctx.len()));
        }
        let (ctx_rows, null_rows) = self.context_rows(ctx)?;

        let e = concatenate![Axis(1), time_embedding(steps, cfg.time_embed_dim), ctx_rows];
        let (m1, time1) = self.dense("time1", e);
        let s1 = m1.mapv(silu);
        let (g, time2) = self.dense("time2", s1);
        let gs = g.mapv(silu);

        let (mut hid, conv_in) = self.dense("conv_in", im2col(x, h));
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let h_in = hid;
            let (a1, conv1) = self.dense(
                &format!("blocks.{i}.conv1"),
                im2col(h_in.mapv(silu).view(), h),
            );
            let (film, film_tape) = self.dense(&format!("blocks.{i}.film"), gs.clone());
            let mut a2 = a1.clone();
            for (row, mut out) in a2.outer_iter_mut().enumerate() {
                let fr = film.row(row / h);
                for ch in 0..w {
                    out[ch] = out[ch] * (1.0 + fr[ch]) + fr[w + ch];
                }
            }
            let (a3, conv2) = self.dense(
                &format!("blocks.{i}.conv2"),
                im2col(a2.mapv(silu).view(), h),
            );
            hid = &h_in + &a3;
            blocks.push(BlockTape {
                h_in,
                conv1,
                a1,
                film,
                film_tape,
                a2,
                conv2,
            });
        }
        let (out, conv_out) = self.dense("conv_out", im2col(hid.mapv(silu).view(), h));
        let tape = Tape {
            batch: b,
            null_rows,
            time1,
            m1,
            time2,
            g,
            conv_in,
            blocks,
            h_out: hid,
            conv_out,
        };
        Ok((out, tape))
    }

    /// Reverse pass for `dout = d loss / d output`.
    pub fn backward(&self, tape: &Tape, dout: &Array2<f64>, request: GradRequest) -> Gradients {
        let cfg = &self.params.config;
        let (h, w) = (cfg.horizon, cfg.hidden_width);
        let mut sink = GradSink {
            params: request.params.then(|| vec![0.0; self.params.len()]),
            adapters: match (request.adapters, self.adapters) {
                (true, Some(set)) => Some(vec![0.0; set.len()]),
                _ => None,
            },
        };

        let dcol = self
            .dense_backward("conv_out", &tape.conv_out, dout, &mut sink, true)
            .expect("input grad");
        let mut dh = col2im(&dcol, h) * &tape.h_out.mapv(silu_grad);
        let mut dgs = Array2::<f64>::zeros((tape.batch, w));

        for (i, bt) in tape.blocks.iter().enumerate().rev() {
            let dcol2 = self
                .dense_backward(
                    &format!("blocks.{i}.conv2"),
                    &bt.conv2,
                    &dh,
                    &mut sink,
                    true,
                )
                .expect("input grad");
            let da2 = col2im(&dcol2, h) * &bt.a2.mapv(silu_grad);
            let mut dfilm = Array2::<f64>::zeros((tape.batch, 2 * w));
            let mut da1 = da2.clone();
            for (row, mut d1) in da1.outer_iter_mut().enumerate() {
                let item = row / h;
                let fr = bt.film.row(item);
                let a1r = bt.a1.row(row);
                let d2r = da2.row(row);
                let mut df = dfilm.row_mut(item);
                for ch in 0..w {
                    df[ch] += d2r[ch] * a1r[ch];
                    df[w + ch] += d2r[ch];
                    d1[ch] = d2r[ch] * (1.0 + fr[ch]);
                }
            }
            dgs += &self
                .dense_backward(
                    &format!("blocks.{i}.film"),
                    &bt.film_tape,
                    &dfilm,
                    &mut sink,
                    true,
                )
                .expect("input grad");
            let dcol1 = self
                .dense_backward(
                    &format!("blocks.{i}.conv1"),
                    &bt.conv1,
                    &da1,
                    &mut sink,
                    true,
                )
                .expect("input grad");
            dh = dh + col2im(&dcol1, h) * &bt.h_in.mapv(silu_grad);
        }
        self.dense_backward("conv_in", &tape.conv_in, &dh, &mut sink, false);

        let dg = dgs * &tape.g.mapv(silu_grad);
        let ds1 = self
            .dense_backward("time2", &tape.time2, &dg, &mut sink, true)
            .expect("input grad");
        let dm1 = ds1 * &tape.m1.mapv(silu_grad);
        let de = self
            .dense_backward("time1", &tape.time1, &dm1, &mut sink, true)
            .expect("input grad");
        let dctx = de.slice(s![.., cfg.time_embed_dim..]).to_owned();

        if let Some(g) = sink.params.as_mut() {
            let null = &mut g[self.params.layout.entry(NULL_CONTEXT).range()];
            for (row, &is_null) in dctx.outer_iter().zip(&tape.null_rows) {
                if is_null {
                    for (acc, v) in null.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
        Gradients {
            params: sink.params,
            adapters: sink.adapters,
            ctx: dctx,
        }
    }
}

struct GradSink {
    params: Option<Vec<f64>>,
    adapters: Option<Vec<f64>>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[sin(k f_0), .., sin(k f_{n-1}), cos(k f_0), .., cos(k f_{n-1})]` with
/// `f_i = 10000^(-i / (n - 1))`, `n = dim / 2`.
pub fn time_embedding(steps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let scale = (10_000f64).ln() / (half - 1) as f64;
    let mut out = Array2::zeros((steps.len(), dim));
    for (i, &k) in steps.iter().enumerate() {
        for j in 0..half {
            let arg = k as f64 * (-(j as f64) * scale).exp();
            out[[i, j]] = arg.sin();
            out[[i, half + j]] = arg.cos();
        }
    }
    out
}

/// Rows `(item, t)` -> `[x(t-1), x(t), x(t+1)]`, zero-padded at both ends of
/// each item.
fn im2col(x: ArrayView2<f64>, h: usize) -> Array2<f64> {
    let (rows, c) = x.dim();
    let mut out = Array2::zeros((rows, 3 * c));
    for r in 0..rows {
        let t = r % h;
        let mut dst = out.row_mut(r);
        if t > 0 {
            dst.slice_mut(s![0..c]).assign(&x.row(r - 1));
        }
        dst.slice_mut(s![c..2 * c]).assign(&x.row(r));
        if t + 1 < h {
            dst.slice_mut(s![2 * c..3 * c]).assign(&x.row(r + 1));
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(dcol: &Array2<f64>, h: usize) -> Array2<f64> {
    let (rows, c3) = dcol.dim();
    let c = c3 / 3;
    let mut out = Array2::<f64>::zeros((rows, c));
    for r in 0..rows {
        let t = r % h;
        let src = dcol.row(r);
        {
            let mut mid = out.row_mut(r);
            mid += &src.slice(s![c..2 * c]);
        }
        if t > 0 {
            let mut prev = out.row_mut(r - 1);
            prev += &src.slice(s![0..c]);
        }
        if t + 1 < h {
            let mut next = out.row_mut(r + 1);
            next += &src.slice(s![2 * c..3 * c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            horizon: 4,
            state_dim: 2,
            action_dim: 2,
            ple_dim: 4,
            hidden_width: 8,
            n_blocks: 1,
            time_embed_dim: DEFAULT_TIME_EMBED_DIM,
            seed: 11,
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // time MLP: (32 + 4) x 32 + 32, 32 x 8 + 8
        // conv_in: 12 x 8 + 8
        // block: conv1 24 x 8 + 8, film 8 x 16 + 16, conv2 24 x 8 + 8
        // conv_out: 24 x 4 + 4; mapper 4 x 4 + 4; null context 4
        let expected = (36 * 32 + 32 + 32 * 8 + 8)
            + (12 * 8 + 8)
            + (24 * 8 + 8 + 8 * 16 + 16 + 24 * 8 + 8)
            + (24 * 4 + 4)
            + (4 * 4 + 4)
            + 4;
        let p = DenoiserParams::init(&small_config()).unwrap();
        assert_eq!(p.layout().total_len(), expected);
        assert_eq!(p.len(), expected);
        p.layout().validate().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let a = DenoiserParams::init(&small_config()).unwrap();
        let b = DenoiserParams::init(&small_config()).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn init_biases_zero_and_null_half() {
        let p = DenoiserParams::init(&small_config()).unwrap();
        for e in p.layout().entries() {
            let vals = &p.as_slice()[e.range()];
            if e.name == NULL_CONTEXT {
                assert!(vals.iter().all(|&v| v == 0.5));
            } else if !e.is_matrix() {
                assert!(vals.iter().all(|&v| v == 0.0), "{}", e.name);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small_config();
        c.horizon = 1;
        assert!(DenoiserParams::init(&c).is_err());
        let mut c = small_config();
        c.time_embed_dim = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn null_sentinel_matches_explicit_null() {
        let p = DenoiserParams::init(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(4, 4, &mut rng);
        let null = p.null_context().to_vec();
        let a = denoise(&p, x.view(), 7, Context::Null).unwrap();
        let b = denoise(&p, x.view(), 7, Context::Embedding(&null)).unwrap();
        assert_eq!(a, b);
        let again = denoise(&p, x.view(), 7, Context::Null).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn context_perturbation_changes_output() {
        let p = DenoiserParams::init(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(4, 4, &mut rng);
        let z = vec![0.3, 0.6, 0.2, 0.9];
        let mut z2 = z.clone();
        z2[1] += 1e-3;
        let a = denoise(&p, x.view(), 3, Context::Embedding(&z)).unwrap();
        let b = denoise(&p, x.view(), 3, Context::Embedding(&z2)).unwrap();
        let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 0.0);
        assert_eq!(a.dim(), x.dim());
    }

    #[test]
    fn shape_errors_name_dimension() {
        let p = DenoiserParams::init(&small_config()).unwrap();
        let err = denoise(&p, Array2::zeros((5, 4)).view(), 0, Context::Null).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
        let err = denoise(&p, Array2::zeros((4, 3)).view(), 0, Context::Null).unwrap_err();
        assert!(err.to_string().contains("transition dim"), "{err}");
        let z = [0.5; 3];
        let err = denoise(&p, Array2::zeros((4, 4)).view(), 0, Context::Embedding(&z)).unwrap_err();
        assert!(err.to_string().contains("context length"), "{err}");
    }

    #[test]
    fn empty_batch_rejected() {
        let p = DenoiserParams::init(&small_config()).unwrap();
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(matches!(loss_and_grads(&p, &s, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(12, 3, &mut rng);
        let y = random_matrix(12, 9, &mut rng);
        let lhs = (&im2col(x.view(), 4) * &y).sum();
        let rhs = (&x * &col2im(&y, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batch_duplication_leaves_loss_and_grads_unchanged() {
        let p = DenoiserParams::init(&small_config()).unwrap();
        let s = NoiseSchedule::cosine(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let taus: Vec<_> = (0..3).map(|_| random_matrix(4, 4, &mut rng)).collect();
        let epss: Vec<_> = (0..3).map(|_| random_matrix(4, 4, &mut rng)).collect();
        let z = [0.2, 0.4, 0.6, 0.8];
        let items: Vec<TrainItem> = (0..3)
            .map(|i| TrainItem {
                tau_0: taus[i].view(),
                k: i * 3,
                eps: epss[i].view(),
                ctx: if i == 1 {
                    Context::Null
                } else {
                    Context::Embedding(&z)
                },
            })
            .collect();
        let doubled: Vec<TrainItem> = items.iter().flat_map(|i| [i.clone(), i.clone()]).collect();
        let a = loss_and_grads(&p, &s, &items).unwrap();
        let b = loss_and_grads(&p, &s, &doubled).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12 * a.loss.max(1.0));
        for (x, y) in a.grad_params.iter().zip(&b.grad_params) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            n_blocks: 2,
            ..small_config()
        };
        let p = DenoiserParams::init(&cfg).unwrap();
        let s = NoiseSchedule::cosine(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let taus: Vec<_> = (0..3).map(|_| random_matrix(4, 4, &mut rng)).collect();
        let epss: Vec<_> = (0..3).map(|_| random_matrix(4, 4, &mut rng)).collect();
        let zs = [vec![0.1, 0.7, 0.4, 0.9], vec![0.5, 0.2, 0.3, 0.6]];
        let loss_at = |params: &DenoiserParams, zs: &[Vec<f64>; 2]| {
            let items: Vec<TrainItem> = (0..3)
                .map(|i| TrainItem {
                    tau_0: taus[i].view(),
                    k: [2, 9, 17][i],
                    eps: epss[i].view(),
                    ctx: if i == 2 {
                        Context::Null
                    } else {
                        Context::Embedding(&zs[i])
                    },
                })
                .collect();
            loss_and_grads(params, &s, &items).unwrap()
        };
        let base = loss_at(&p, &zs);
        let h = 1e-4;
        let n = p.len();
        for _ in 0..50 {
            let idx = rand::RngExt::random_range(&mut rng, 0..n);
            let numeric = central_difference(
                |v| {
                    let mut q = p.clone();
                    q.as_mut_slice()[idx] = v;
                    loss_at(&q, &zs).loss
                },
                p.as_slice()[idx],
                h,
            );
            let analytic = base.grad_params[idx];
            assert!(
                rel_err(analytic, numeric) < 1e-4,
                "param {idx}: {analytic} vs {numeric}"
            );
        }
        for item in 0..2 {
            for d in 0..4 {
                let numeric = central_difference(
                    |v| {
                        let mut z = zs.clone();
                        z[item][d] = v;
                        loss_at(&p, &z).loss
                    },
                    zs[item][d],
                    h,
                );
                let analytic = base.grad_ctx[item][d];
                assert!(
                    rel_err(analytic, numeric) < 1e-4,
                    "ctx {item}/{d}: {analytic} vs {numeric}"
                );
            }
        }
        assert!(base.grad_ctx.iter().flatten().any(|g| g.abs() > 0.0));
    }
}

//! Evaluation harness: label, adapt, sample and score every method against
//! the unadapted model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{oracle_queries, LabeledQueries, Method, Planner, RunConfig};
use crate::baselines::{
    finetune_full, finetune_lora, guided_sample, train_reward_model, LowRankSet,
};
use crate::env::{CorpusManifest, FullTrajectory, OracleSpec};
use crate::error::{Error, Result};
use crate::eval::{mean_reward, normalized_score, win_rate};
use crate::model::{Denoiser, DenoiserParams};
use crate::ple::InversionConfig;
use crate::sampler::{Guidance, GuidanceWeights};

pub const CSV_HEADER: &str = "method,n_query,n_adapt,seed,metric,value";

const LABEL_TAG: u64 = 0x1AB3_1500;
const METHOD_SAMPLE_TAG: u64 = 0x5A11_0000;
const BASE_SAMPLE_TAG: u64 = 0xBA5E_0000;
const PAIRING_TAG: u64 = 0x0BA1_2000;

/// One evaluated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Method name, suffixed with `@key=value` for sweep variants.
    pub method: String,
    pub n_query: usize,
    /// Labels left after dropping ties.
    pub n_labels: usize,
    pub n_adapt: usize,
    pub seed: u64,
    pub mean_reward: f64,
    pub win_rate: f64,
    pub normalized_score: f64,
    pub runtime_secs: f64,
}

/// Mean and spread of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub n_query: usize,
    pub n_adapt: usize,
    pub seeds: Vec<u64>,
    pub win_rate_mean: f64,
    pub win_rate_std: f64,
    pub mean_reward_mean: f64,
    pub normalized_score_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups reports by `(method, n_query, n_adapt)`, sorted by that key.
pub fn aggregate(reports: &[EvalReport]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.method.clone(), r.n_query, r.n_adapt))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, n_query, n_adapt), rs)| {
            let wins: Vec<f64> = rs.iter().map(|r| r.win_rate).collect();
            let (win_rate_mean, win_rate_std) = mean_std(&wins);
            Summary {
                method,
                n_query,
                n_adapt,
                seeds: rs.iter().map(|r| r.seed).collect(),
                win_rate_mean,
                win_rate_std,
                mean_reward_mean: mean_std(&rs.iter().map(|r| r.mean_reward).collect::<Vec<_>>()).0,
                normalized_score_mean: mean_std(
                    &rs.iter().map(|r| r.normalized_score).collect::<Vec<_>>(),
                )
                .0,
            }
        })
        .collect()
}

/// Flat table, one metric per row.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (metric, value) in [
            ("win_rate", r.win_rate),
            ("mean_reward", r.mean_reward),
            ("normalized_score", r.normalized_score),
            ("n_labels", r.n_labels as f64),
            ("runtime_secs", r.runtime_secs),
        ] {
            writeln!(
                out,
                "{},{},{},{},{metric},{value}",
                r.method, r.n_query, r.n_adapt, r.seed
            )
            .expect("string write");
        }
    }
    out
}

fn budgets(default: usize, sweep: &[usize]) -> Vec<usize> {
    let mut steps: Vec<usize> = sweep
        .iter()
        .copied()
        .chain([default])
        .filter(|&s| s > 0)
        .collect();
    steps.sort_unstable();
    steps.dedup();
    steps
}

/// Evaluation context over one pretrained planner. Unadapted reference
/// samples are cached per seed.
pub struct Experiment<'a> {
    pub planner: &'a Planner,
    pub corpus: &'a [FullTrajectory],
    pub manifest: &'a CorpusManifest,
    pub oracle: OracleSpec,
    pub n_samples: usize,
    base: HashMap<u64, Vec<Array2<f64>>>,
}

impl<'a> Experiment<'a> {
    pub fn new(
        planner: &'a Planner,
        corpus: &'a [FullTrajectory],
        manifest: &'a CorpusManifest,
    ) -> Self {
        Self {
            planner,
            corpus,
            manifest,
            oracle: planner.config.eval.oracle,
            n_samples: planner.config.eval.n_samples,
            base: HashMap::new(),
        }
    }

    pub fn labels(&self, n_query: usize, seed: u64) -> Result<LabeledQueries> {
        oracle_queries(
            self.corpus,
            &self.planner.normalizer,
            n_query,
            self.planner.horizon(),
            &self.oracle,
            self.planner.state_dim(),
            seed ^ LABEL_TAG,
        )
    }

    /// Null-context samples of the unadapted planner for `seed`.
    pub fn base_samples(&mut self, seed: u64) -> Result<&[Array2<f64>]> {
        if !self.base.contains_key(&seed) {
            let s = self.planner.sample(
                Guidance::Unconditional,
                self.n_samples,
                seed ^ BASE_SAMPLE_TAG,
            )?;
            self.base.insert(seed, s);
        }
        Ok(&self.base[&seed])
    }

    pub fn method_seed(seed: u64) -> u64 {
        seed ^ METHOD_SAMPLE_TAG
    }

    /// Oracle win rate of `samples` against the unadapted planner.
    pub fn win_rate_vs_base(&mut self, samples: &[Array2<f64>], seed: u64) -> Result<f64> {
        let oracle = self.oracle;
        let sd = self.planner.state_dim();
        let base = self.base_samples(seed)?;
        win_rate(samples, base, &oracle, sd, seed ^ PAIRING_TAG)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn score(
        &mut self,
        method: &str,
        samples: &[Array2<f64>],
        n_query: usize,
        n_labels: usize,
        n_adapt: usize,
        seed: u64,
        started: Instant,
    ) -> Result<EvalReport> {
        let sd = self.planner.state_dim();
        let mean = mean_reward(samples, &self.oracle, sd);
        let reference = self.manifest.reference(&self.oracle).ok_or_else(|| {
            Error::Config(format!(
                "manifest has no reference scores for {:?}",
                self.oracle
            ))
        })?;
        if self.manifest.horizon != self.planner.horizon() {
            return Err(Error::Config(format!(
                "manifest reference horizon {} differs from model horizon {}",
                self.manifest.horizon,
                self.planner.horizon()
            )));
        }
        Ok(EvalReport {
            method: method.to_string(),
            n_query,
            n_labels,
            n_adapt,
            seed,
            mean_reward: mean,
            win_rate: self.win_rate_vs_base(samples, seed)?,
            normalized_score: normalized_score(mean, reference.random, reference.expert)?,
            runtime_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Dual-guided samples from inverted latents.
    pub fn dual_samples(
        &self,
        z_w: &[f64],
        z_l: &[f64],
        weights: GuidanceWeights,
        seed: u64,
    ) -> Result<Vec<Array2<f64>>> {
        self.planner.sample(
            Guidance::Dual { z_w, z_l, weights },
            self.n_samples,
            Self::method_seed(seed),
        )
    }

    /// Full finetuning with the model captured after each budget in `steps`.
    pub fn finetune_full_snapshots(
        &self,
        labels: &LabeledQueries,
        seed: u64,
        steps: &[usize],
    ) -> Result<Vec<(usize, DenoiserParams)>> {
        let base = &self.planner.params;
        let mut config = self.planner.config.finetune.clone();
        config.n_updates = steps.iter().copied().max().unwrap_or(0);
        config.seed = seed;
        let mut snaps = Vec::new();
        let out = finetune_full(
            base,
            &self.planner.schedule,
            &labels.preferences,
            &config,
            |s| {
                if steps.contains(&s.step) && s.step != config.n_updates {
                    let mut p = base.clone();
                    p.as_mut_slice().copy_from_slice(s.weights);
                    snaps.push((s.step, p));
                }
            },
        )?;
        snaps.push((config.n_updates, out.model));
        Ok(snaps)
    }

    pub fn finetune_lora_snapshots(
        &self,
        labels: &LabeledQueries,
        seed: u64,
        steps: &[usize],
    ) -> Result<Vec<(usize, LowRankSet)>> {
        let mut config = self.planner.config.finetune.clone();
        config.n_updates = steps.iter().copied().max().unwrap_or(0);
        config.seed = seed;
        let mut snaps = Vec::new();
        let mut template: Option<LowRankSet> = None;
        let out = finetune_lora(
            &self.planner.params,
            &self.planner.schedule,
            &labels.preferences,
            &config,
            |s| {
                if steps.contains(&s.step) && s.step != config.n_updates {
                    let t = template.get_or_insert_with(|| {
                        LowRankSet::new(&self.planner.params, config.rank, &config.targets, 0)
                            .expect("validated by finetune_lora")
                    });
                    let mut set = t.clone();
                    set.as_mut_slice().copy_from_slice(s.weights);
                    snaps.push((s.step, set));
                }
            },
        )?;
        snaps.push((config.n_updates, out.model));
        Ok(snaps)
    }

    /// Runs `method` for one `(n_query, seed)` cell, including the sweeps
    /// listed in the planner's eval config.
    pub fn run_cell(
        &mut self,
        method: Method,
        n_query: usize,
        seed: u64,
    ) -> Result<Vec<EvalReport>> {
        let started = Instant::now();
        let cfg = self.planner.config.clone();
        let sweeps = &cfg.eval;
        let labels = self.labels(n_query, seed)?;
        let n_labels = labels.labels.len();
        let sample_seed = Self::method_seed(seed);
        let mut out = Vec::new();
        match method {
            Method::Diffuser => {
                let s =
                    self.planner
                        .sample(Guidance::Unconditional, self.n_samples, sample_seed)?;
                out.push(self.score(method.name(), &s, n_query, n_labels, 0, seed, started)?);
            }
            Method::PreferenceInversion => {
                let inv = InversionConfig {
                    seed,
                    ..cfg.inversion
                };
                let steps = budgets(inv.n_adapt, &sweeps.n_adapt_sweep);
                let run = InversionConfig {
                    n_adapt: *steps.last().expect("nonempty"),
                    ..inv
                };
                let snaps = self
                    .planner
                    .invert(&labels.preferences, &run, &steps, |_| {})?;
                for snap in &snaps {
                    let s = self.dual_samples(&snap.z_w, &snap.z_l, cfg.guidance, seed)?;
                    out.push(self.score(
                        method.name(),
                        &s,
                        n_query,
                        n_labels,
                        snap.step,
                        seed,
                        started,
                    )?);
                }
                let default = snaps
                    .iter()
                    .find(|s| s.step == inv.n_adapt)
                    .expect("default budget snapshotted");
                for &u in sweeps.u_sweep.iter().filter(|&&u| u != cfg.guidance.u) {
                    let weights = GuidanceWeights { u, ..cfg.guidance };
                    let s = self.dual_samples(&default.z_w, &default.z_l, weights, seed)?;
                    let label = format!("{}@u={u}", method.name());
                    out.push(self.score(
                        &label,
                        &s,
                        n_query,
                        n_labels,
                        inv.n_adapt,
                        seed,
                        started,
                    )?);
                }
                for &prior in sweeps.prior_sweep.iter().filter(|&&p| p != inv.prior) {
                    let snap = self
                        .planner
                        .invert(
                            &labels.preferences,
                            &InversionConfig { prior, ..inv },
                            &[],
                            |_| {},
                        )?
                        .pop()
                        .expect("final snapshot");
                    let s = self.dual_samples(&snap.z_w, &snap.z_l, cfg.guidance, seed)?;
                    let label = format!("{}@prior={}", method.name(), prior.name());
                    out.push(self.score(
                        &label,
                        &s,
                        n_query,
                        n_labels,
                        inv.n_adapt,
                        seed,
                        started,
                    )?);
                }
            }
            Method::GuidedSampling => {
                let config = crate::baselines::RewardTrainConfig { seed, ..cfg.reward };
                let (rm, _) = train_reward_model(&labels.preferences, &config)?;
                let raw = guided_sample(
                    &self.planner.params,
                    &rm,
                    &self.planner.schedule,
                    sweeps.classifier_scale,
                    self.n_samples,
                    sample_seed,
                    &[],
                )?;
                let s = self.planner.denormalize(raw)?;
                out.push(self.score(
                    method.name(),
                    &s,
                    n_query,
                    n_labels,
                    config.n_updates,
                    seed,
                    started,
                )?);
            }
            Method::FinetuneFull => {
                let steps = budgets(cfg.finetune.n_updates, &sweeps.n_adapt_sweep);
                for (step, params) in self.finetune_full_snapshots(&labels, seed, &steps)? {
                    let s = self.planner.sample_from(
                        &Denoiser::new(&params),
                        Guidance::Unconditional,
                        self.n_samples,
                        sample_seed,
                    )?;
                    out.push(self.score(
                        method.name(),
                        &s,
                        n_query,
                        n_labels,
                        step,
                        seed,
                        started,
                    )?);
                }
            }
            Method::FinetuneLora => {
                let steps = budgets(cfg.finetune.n_updates, &sweeps.n_adapt_sweep);
                for (step, set) in self.finetune_lora_snapshots(&labels, seed, &steps)? {
                    let net = Denoiser::with_adapters(&self.planner.params, &set);
                    let s = self.planner.sample_from(
                        &net,
                        Guidance::Unconditional,
                        self.n_samples,
                        sample_seed,
                    )?;
                    out.push(self.score(
                        method.name(),
                        &s,
                        n_query,
                        n_labels,
                        step,
                        seed,
                        started,
                    )?);
                }
            }
        }
        Ok(out)
    }
}

/// Every `(method, n_query, seed)` cell of the config's eval grid, then the
/// latent-width sweep (each width retrains the denoiser). Reports come back
/// sorted by cell key.
pub fn run_experiment(
    config: &RunConfig,
    planner: &Planner,
    corpus: &[FullTrajectory],
    manifest: &CorpusManifest,
    mut progress: impl FnMut(&EvalReport),
) -> Result<Vec<EvalReport>> {
    let methods: Vec<Method> = config
        .eval
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_>>()?;
    let mut planner = planner.clone();
    planner.config.eval = config.eval.clone();
    planner.config.inversion = config.inversion;
    planner.config.guidance = config.guidance;
    planner.config.finetune = config.finetune.clone();
    planner.config.reward = config.reward;
    let mut reports = Vec::new();
    {
        let mut exp = Experiment::new(&planner, corpus, manifest);
        for &method in &methods {
            for &n_query in &config.eval.n_query {
                for &seed in &config.eval.seeds {
                    for r in exp.run_cell(method, n_query, seed)? {
                        progress(&r);
                        reports.push(r);
                    }
                }
            }
        }
    }
    for &d in &config.eval.ple_dim_sweep {
        let mut model = planner.config.model.clone();
        model.ple_dim = d;
        let (wide, _) = Planner::pretrain(&planner.config, &model, corpus, manifest, |_| {})?;
        let mut sweep_cfg = wide.config.eval.clone();
        sweep_cfg.u_sweep.clear();
        sweep_cfg.prior_sweep.clear();
        sweep_cfg.n_adapt_sweep.clear();
        let mut wide = wide;
        wide.config.eval = sweep_cfg;
        let mut exp = Experiment::new(&wide, corpus, manifest);
        for &n_query in &config.eval.n_query {
            for &seed in &config.eval.seeds {
                for mut r in exp.run_cell(Method::PreferenceInversion, n_query, seed)? {
                    r.method = format!("{}@d_e={d}", r.method);
                    progress(&r);
                    reports.push(r);
                }
            }
        }
    }
    reports.sort_by(|a, b| {
        (&a.method, a.n_query, a.n_adapt, a.seed)
            .partial_cmp(&(&b.method, b.n_query, b.n_adapt, b.seed))
            .expect("total order on keys")
    });
    Ok(reports)
}

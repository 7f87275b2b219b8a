//! Subcommand implementations.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use plediff_core::env::{generate_corpus, read_corpus, read_labels, write_corpus, write_labels};
use plediff_core::eval::latent_probe;
use plediff_core::pipeline::{
    adapt, aggregate, normalized_episodes, oracle_queries, reports_to_csv, run_experiment,
    AdaptedLatents, Checkpoint, Planner, RunConfig,
};
use plediff_core::{CorpusManifest, Guidance, MapperParams};

use crate::service::{rewards_json, serve, trajectory_json, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "plediff",
    version,
    about = "Preference-aligned diffusion trajectory planner"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand accepts.
#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the scripted trajectory corpus and its manifest.
    GenData(GenData),
    /// Pretrain the denoiser and latent mapper on a corpus.
    Pretrain(Pretrain),
    /// Invert preference labels into winner/loser latents.
    Adapt(Adapt),
    /// Draw trajectories in environment units.
    Sample(Sample),
    /// Run the evaluation grid and the latent probe.
    Eval(Eval),
    /// Serve the labeling and adaptation HTTP API.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    #[command(flatten)]
    pub shared: Shared,
    /// Corpus directory; defaults to `paths.data_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Adapt {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label file (JSON lines). Without it, `--oracle-queries` pairs are
    /// drawn and labeled by the configured oracle.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub oracle_queries: usize,
    /// Overrides `inversion.n_adapt`.
    #[arg(long)]
    pub n_adapt: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Sample {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapted latents from `adapt`; without them the null context is used.
    #[arg(long)]
    pub adapted: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Overrides `guidance.u`.
    #[arg(long)]
    pub u: Option<f64>,
    /// Overrides `guidance.v`.
    #[arg(long)]
    pub v: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

impl Shared {
    pub fn config(&self) -> anyhow::Result<RunConfig> {
        let config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => config.with_seed(s),
            None => config,
        })
    }

    fn out_or(&self, fallback: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| fallback.to_path_buf())
    }
}

fn data_dir(flag: &Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| config.paths.data_dir.clone())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Planner> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Planner::from_checkpoint(&ck)?)
}

/// Checkpoint plus corpus, checked against each other.
fn load_model(
    checkpoint: &Path,
    data: &Path,
) -> anyhow::Result<(Planner, Vec<plediff_core::FullTrajectory>, CorpusManifest)> {
    let planner = load_checkpoint(checkpoint)?;
    let (corpus, manifest) =
        read_corpus(data).with_context(|| format!("reading corpus in {}", data.display()))?;
    if manifest.normalizer != planner.normalizer {
        bail!(
            "corpus in {} was not the one {} was trained on",
            data.display(),
            checkpoint.display()
        );
    }
    Ok((planner, corpus, manifest))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let config = a.shared.config()?;
    let out = a.shared.out_or(&config.paths.data_dir);
    let d = &config.data;
    let corpus = generate_corpus(d.n_episodes, d.episode_len, d.n_modes, config.seed)?;
    let manifest = CorpusManifest::build(&corpus, d.n_modes, config.seed, config.model.horizon)?;
    write_corpus(&out, &corpus, &manifest)?;
    tracing::info!(episodes = corpus.len(), out = %out.display(), "corpus written");
    Ok(())
}

fn pretrain(a: Pretrain) -> anyhow::Result<()> {
    let config = a.shared.config()?;
    let out = a.shared.out_or(&config.paths.out_dir);
    let (corpus, manifest) = read_corpus(&data_dir(&a.data, &config))?;
    let total = config.pretrain.n_updates;
    let (planner, history) = Planner::pretrain(&config, &config.model, &corpus, &manifest, |s| {
        if s.step % 1000 == 0 || s.step == total {
            tracing::info!(step = s.step, loss = s.loss, "pretrain");
        }
    })?;
    fs::create_dir_all(&out)?;
    planner.checkpoint().save(&out.join("model.ckpt"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(out.join("loss.csv"), csv)?;
    fs::write(out.join("config.toml"), config.to_toml_string())?;
    tracing::info!(out = %out.display(), "checkpoint written");
    Ok(())
}

fn adapt_cmd(a: Adapt) -> anyhow::Result<()> {
    let config = a.shared.config()?;
    let out = a.shared.out_or(&config.paths.out_dir);
    let (planner, corpus, _) = load_model(&a.checkpoint, &data_dir(&a.data, &config))?;
    fs::create_dir_all(&out)?;
    let records = match &a.labels {
        Some(p) => read_labels(p).with_context(|| format!("reading labels {}", p.display()))?,
        None => {
            let q = oracle_queries(
                &corpus,
                &planner.normalizer,
                a.oracle_queries,
                planner.horizon(),
                &config.eval.oracle,
                planner.state_dim(),
                config.seed,
            )?;
            write_labels(&out.join("labels.jsonl"), &q.records)?;
            q.records
        }
    };
    let mut inv = config.inversion;
    if let Some(n) = a.n_adapt {
        inv.n_adapt = n;
    }
    let adapted = adapt(&planner, &records, &corpus, &inv, |s| {
        if s.step % 500 == 0 {
            tracing::info!(step = s.step, loss = s.loss, "adapt");
        }
    })?;
    adapted.save(&out.join("adapted.json"))?;
    tracing::info!(labels = adapted.n_labels, hash = %adapted.label_sha256, "adapted latents written");
    Ok(())
}

fn sample(a: Sample) -> anyhow::Result<()> {
    let config = a.shared.config()?;
    let out = a.shared.out_or(&config.paths.out_dir);
    let planner = load_checkpoint(&a.checkpoint)?;
    let mut weights = config.guidance;
    weights.u = a.u.unwrap_or(weights.u);
    weights.v = a.v.unwrap_or(weights.v);
    let adapted = a.adapted.as_deref().map(AdaptedLatents::load).transpose()?;
    let guidance = match &adapted {
        Some(l) => Guidance::Dual {
            z_w: &l.z_w,
            z_l: &l.z_l,
            weights,
        },
        None => Guidance::Unconditional,
    };
    let samples = planner.sample(guidance, a.n, config.seed)?;
    let sd = planner.state_dim();
    let list: Vec<_> = samples
        .iter()
        .map(|m| {
            let mut t = trajectory_json(m.view(), sd);
            t["rewards"] = rewards_json(m.view(), sd);
            t
        })
        .collect();
    fs::create_dir_all(&out)?;
    write_json(
        &out.join("samples.json"),
        &json!({ "seed": config.seed, "guidance": if adapted.is_some() { "dual" } else { "unconditional" }, "samples": list }),
    )?;
    tracing::info!(n = a.n, out = %out.display(), "samples written");
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let config = a.shared.config()?;
    let out = a.shared.out_or(&config.paths.out_dir);
    let (planner, corpus, manifest) = load_model(&a.checkpoint, &data_dir(&a.data, &config))?;
    fs::create_dir_all(&out)?;

    let episodes = normalized_episodes(&corpus, &planner.normalizer)?;
    let views: Vec<_> = episodes.iter().map(|e| e.view()).collect();
    let raw: Vec<_> = corpus.iter().map(|e| e.matrix()).collect();
    let raw_views: Vec<_> = raw.iter().map(|e| e.view()).collect();
    let modes: Vec<usize> = corpus.iter().map(|e| e.mode_id).collect();
    let mapper = MapperParams::from_params(&planner.params, planner.mask.clone());
    let probe = latent_probe(
        &mapper,
        &views,
        &modes,
        &raw_views,
        &config.eval.oracle,
        planner.state_dim(),
        config.seed,
    )?;
    tracing::info!(accuracy = probe.accuracy, "latent probe");
    write_json(&out.join("probe.json"), &probe)?;

    let reports = run_experiment(&config, &planner, &corpus, &manifest, |r| {
        tracing::info!(method = %r.method, n_query = r.n_query, n_adapt = r.n_adapt, seed = r.seed, win_rate = r.win_rate, "cell");
    })?;
    let mut jsonl = String::new();
    for r in &reports {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(out.join("reports.jsonl"), jsonl)?;
    fs::write(out.join("report.csv"), reports_to_csv(&reports))?;
    write_json(&out.join("summary.json"), &aggregate(&reports))?;
    Ok(())
}

fn serve_cmd(a: Serve) -> anyhow::Result<()> {
    let config = a.shared.config()?;
    let root = a.shared.out_or(&config.paths.session_dir);
    let (planner, corpus, _) = load_model(&a.checkpoint, &data_dir(&a.data, &config))?;
    let state = AppState::open(planner, corpus, &root)?;
    tokio::runtime::Runtime::new()?.block_on(serve(state, a.addr))
}

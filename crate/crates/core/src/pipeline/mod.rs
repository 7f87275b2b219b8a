//! Orchestration shared by the command line and the HTTP service: run
//! configuration, checkpoints, pretraining, adaptation and sampling in
//! environment units.

mod checkpoint;
mod config;
mod experiment;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointHeader, ModelSpec, FORMAT_VERSION, MAGIC};
pub use config::{DataConfig, EvalConfig, PathsConfig, RunConfig};
pub use experiment::{
    aggregate, reports_to_csv, run_experiment, EvalReport, Experiment, Summary, CSV_HEADER,
};

use crate::env::{
    make_query_pairs, oracle_label, resolve_labels, CorpusManifest, FullTrajectory, LabelRecord,
    Normalizer, OracleSpec, PreferenceLabel, PreferencePair, QueryPair,
};
use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig, DenoiserParams};
use crate::ple::{invert_preferences_with, InversionConfig, InversionStep, Mask};
use crate::sampler::{sample_guided, Guidance};
use crate::schedule::NoiseSchedule;
use crate::train::{pretrain, PretrainStep};

/// Adaptation methods compared by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The pretrained model sampled with the null context.
    Diffuser,
    PreferenceInversion,
    GuidedSampling,
    FinetuneFull,
    FinetuneLora,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Diffuser,
        Method::PreferenceInversion,
        Method::GuidedSampling,
        Method::FinetuneFull,
        Method::FinetuneLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Diffuser => "diffuser",
            Method::PreferenceInversion => "preference_inversion",
            Method::GuidedSampling => "guided_sampling",
            Method::FinetuneFull => "finetune_full",
            Method::FinetuneLora => "finetune_lora",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A pretrained denoiser together with everything needed to sample from it
/// in environment units.
#[derive(Debug, Clone)]
pub struct Planner {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub mask: Mask,
    pub config: RunConfig,
}

/// Corpus episodes as normalized `L x (S + A)` matrices.
pub fn normalized_episodes(
    corpus: &[FullTrajectory],
    normalizer: &Normalizer,
) -> Result<Vec<Array2<f64>>> {
    corpus
        .iter()
        .map(|e| normalizer.normalize(e.matrix().view()))
        .collect()
}

impl Planner {
    /// Trains a fresh denoiser and mapper on `corpus`. `model` overrides the
    /// architecture in `config` (used by latent-width sweeps).
    pub fn pretrain(
        config: &RunConfig,
        model: &DenoiserConfig,
        corpus: &[FullTrajectory],
        manifest: &CorpusManifest,
        observer: impl FnMut(PretrainStep<'_>),
    ) -> Result<(Self, Vec<f64>)> {
        config.validate()?;
        manifest.check(corpus)?;
        if manifest.episode_len != config.data.episode_len {
            return Err(Error::Config(format!(
                "corpus episodes have length {}, config expects {}",
                manifest.episode_len, config.data.episode_len
            )));
        }
        let mask = config.mask()?;
        let schedule = NoiseSchedule::cosine(config.diffusion_steps)?;
        let episodes = normalized_episodes(corpus, &manifest.normalizer)?;
        let mut params = DenoiserParams::init(model)?;
        let history = pretrain(
            &mut params,
            &episodes,
            &mask,
            &schedule,
            &config.pretrain,
            config.seed ^ 0x9E7A,
            observer,
        )?;
        let mut config = config.clone();
        config.model = model.clone();
        Ok((
            Self {
                params,
                schedule,
                normalizer: manifest.normalizer.clone(),
                mask,
                config,
            },
            history,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = ck.to_denoiser()?;
        let h = &ck.header;
        Ok(Self {
            params,
            schedule: NoiseSchedule::cosine(h.config.diffusion_steps)?,
            normalizer: h.normalizer.clone(),
            mask: h.mask.clone(),
            config: h.config.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::denoiser(&self.params, &self.config, &self.normalizer, &self.mask)
    }

    pub fn horizon(&self) -> usize {
        self.params.config().horizon
    }

    pub fn state_dim(&self) -> usize {
        self.params.config().state_dim
    }

    pub fn denormalize(&self, samples: Vec<Array2<f64>>) -> Result<Vec<Array2<f64>>> {
        samples
            .iter()
            .map(|s| self.normalizer.denormalize(s.view()))
            .collect()
    }

    /// `n` trajectories from `net` (normally this planner's own denoiser,
    /// possibly finetuned or adapted), in environment units.
    pub fn sample_from(
        &self,
        net: &Denoiser<'_>,
        guidance: Guidance<'_>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Array2<f64>>> {
        let raw = sample_guided(net, &self.schedule, guidance, n, seed, &[])?;
        self.denormalize(raw)
    }

    pub fn sample(&self, guidance: Guidance<'_>, n: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
        self.sample_from(&Denoiser::new(&self.params), guidance, n, seed)
    }

    /// Preference inversion against this planner's frozen weights, with the
    /// latents captured after each update listed in `snapshots`.
    pub fn invert(
        &self,
        pairs: &[PreferencePair],
        config: &InversionConfig,
        snapshots: &[usize],
        mut observer: impl FnMut(InversionStep<'_>),
    ) -> Result<Vec<Snapshot>> {
        let mut taken = Vec::new();
        let inv = invert_preferences_with(&self.params, &self.schedule, pairs, config, |s| {
            if snapshots.contains(&s.step) && s.step != config.n_adapt {
                taken.push(Snapshot {
                    step: s.step,
                    z_w: s.z_w.to_vec(),
                    z_l: s.z_l.to_vec(),
                    loss: s.loss,
                });
            }
            observer(s);
        })?;
        taken.push(Snapshot {
            step: config.n_adapt,
            z_w: inv.z_w,
            z_l: inv.z_l,
            loss: inv.loss_history.last().copied().unwrap_or(f64::NAN),
        });
        Ok(taken)
    }
}

/// Winner and loser latents after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub z_w: Vec<f64>,
    pub z_l: Vec<f64>,
    pub loss: f64,
}

/// Oracle-labeled query pairs. Tied pairs are dropped, so fewer than
/// `n_query` labels may come back.
#[derive(Debug, Clone)]
pub struct LabeledQueries {
    pub pairs: Vec<QueryPair>,
    pub labels: Vec<PreferenceLabel>,
    pub records: Vec<LabelRecord>,
    /// Normalized winner/loser matrices, one per label.
    pub preferences: Vec<PreferencePair>,
}

pub fn oracle_queries(
    corpus: &[FullTrajectory],
    normalizer: &Normalizer,
    n_query: usize,
    horizon: usize,
    oracle: &OracleSpec,
    state_dim: usize,
    seed: u64,
) -> Result<LabeledQueries> {
    let pairs = make_query_pairs(corpus, n_query, horizon, seed)?;
    let labels: Vec<PreferenceLabel> = pairs
        .iter()
        .filter_map(|p| oracle_label(p, oracle, state_dim))
        .collect();
    let preferences = resolve_labels(&labels, &pairs, normalizer)?;
    let records = labels
        .iter()
        .map(|l| {
            let pair = pairs
                .iter()
                .find(|p| p.pair_id == l.pair_id)
                .expect("label from pair");
            LabelRecord::new(pair, l, 0)
        })
        .collect();
    Ok(LabeledQueries {
        pairs,
        labels,
        records,
        preferences,
    })
}

/// Hex SHA-256 over the records' canonical JSON lines.
pub fn label_set_hash(records: &[LabelRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("label serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Re-cuts and normalizes the segments of stored label records.
pub fn resolve_records(
    records: &[LabelRecord],
    corpus: &[FullTrajectory],
    normalizer: &Normalizer,
    horizon: usize,
) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let pair = r
            .pair(corpus, horizon)
            .map_err(|e| Error::UnknownPair(format!("{}: {e}", r.pair_id)))?;
        pairs.extend(resolve_labels(&[r.label()], &[pair], normalizer)?);
    }
    Ok(pairs)
}

/// Result of `adapt`: the inverted latents plus what produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptedLatents {
    pub z_w: Vec<f64>,
    pub z_l: Vec<f64>,
    pub n_labels: usize,
    pub label_sha256: String,
    pub inversion: InversionConfig,
    pub final_loss: f64,
}

impl AdaptedLatents {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Inverts `records` against the planner's frozen denoiser.
pub fn adapt(
    planner: &Planner,
    records: &[LabelRecord],
    corpus: &[FullTrajectory],
    config: &InversionConfig,
    observer: impl FnMut(InversionStep<'_>),
) -> Result<AdaptedLatents> {
    let pairs = resolve_records(records, corpus, &planner.normalizer, planner.horizon())?;
    let snap = planner
        .invert(&pairs, config, &[], observer)?
        .pop()
        .expect("final snapshot");
    Ok(AdaptedLatents {
        z_w: snap.z_w,
        z_l: snap.z_l,
        n_labels: records.len(),
        label_sha256: label_set_hash(records),
        inversion: *config,
        final_loss: snap.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_corpus, OracleKind};

    fn tiny() -> (RunConfig, Vec<FullTrajectory>, CorpusManifest) {
        let mut config = RunConfig::default();
        config.data.n_episodes = 40;
        config.model.hidden_width = 8;
        config.model.n_blocks = 1;
        config.model.ple_dim = 4;
        config.pretrain.n_updates = 20;
        config.diffusion_steps = 10;
        let corpus = generate_corpus(40, 64, 4, 1).unwrap();
        let manifest = CorpusManifest::build(&corpus, 4, 1, 16).unwrap();
        (config, corpus, manifest)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "dpo".parse::<Method>().unwrap_err();
        assert!(matches!(err, Error::UnknownMethod(ref s) if s == "dpo"));
    }

    #[test]
    fn pretrain_is_deterministic_and_checkpoints() {
        let (config, corpus, manifest) = tiny();
        let (a, ha) =
            Planner::pretrain(&config, &config.model, &corpus, &manifest, |_| {}).unwrap();
        let (b, hb) =
            Planner::pretrain(&config, &config.model, &corpus, &manifest, |_| {}).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(
            a.checkpoint().to_bytes().unwrap(),
            b.checkpoint().to_bytes().unwrap()
        );
        let back = Planner::from_checkpoint(
            &Checkpoint::from_bytes(&a.checkpoint().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.mask, a.mask);
        assert_eq!(back.schedule.steps(), 10);
    }

    #[test]
    fn samples_are_denormalized_and_deterministic() {
        let (config, corpus, manifest) = tiny();
        let (planner, _) =
            Planner::pretrain(&config, &config.model, &corpus, &manifest, |_| {}).unwrap();
        let a = planner.sample(Guidance::Unconditional, 3, 5).unwrap();
        let b = planner.sample(Guidance::Unconditional, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let raw = sample_guided(
            &Denoiser::new(&planner.params),
            &planner.schedule,
            Guidance::Unconditional,
            3,
            5,
            &[],
        )
        .unwrap();
        let back = planner.normalizer.normalize(a[0].view()).unwrap();
        assert!((&back - &raw[0]).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn adapt_is_deterministic_and_hashes_labels() {
        let (config, corpus, manifest) = tiny();
        let (planner, _) =
            Planner::pretrain(&config, &config.model, &corpus, &manifest, |_| {}).unwrap();
        let q = oracle_queries(
            &corpus,
            &planner.normalizer,
            6,
            16,
            &OracleSpec::new(OracleKind::Speed, 1),
            2,
            3,
        )
        .unwrap();
        let inv = InversionConfig {
            n_adapt: 15,
            ..InversionConfig::default()
        };
        let a = adapt(&planner, &q.records, &corpus, &inv, |_| {}).unwrap();
        let b = adapt(&planner, &q.records, &corpus, &inv, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_labels, q.records.len());
        assert_eq!(a.label_sha256.len(), 64);
        assert_ne!(label_set_hash(&q.records[1..]), a.label_sha256);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapted.json");
        a.save(&path).unwrap();
        assert_eq!(AdaptedLatents::load(&path).unwrap(), a);
    }

    #[test]
    fn adapt_rejects_unknown_pairs_by_id() {
        let (config, corpus, manifest) = tiny();
        let (planner, _) =
            Planner::pretrain(&config, &config.model, &corpus, &manifest, |_| {}).unwrap();
        let q = oracle_queries(
            &corpus,
            &planner.normalizer,
            4,
            16,
            &OracleSpec::new(OracleKind::Speed, 1),
            2,
            3,
        )
        .unwrap();
        let mut records = q.records.clone();
        records[0].pair_id = "ghost-pair".into();
        records[0].a.episode_id = 9999;
        let err = adapt(
            &planner,
            &records,
            &corpus,
            &InversionConfig::default(),
            |_| {},
        )
        .unwrap_err();
        assert!(err.to_string().contains("ghost-pair"), "{err}");
    }

    #[test]
    fn snapshots_match_separate_shorter_runs() {
        let (config, corpus, manifest) = tiny();
        let (planner, _) =
            Planner::pretrain(&config, &config.model, &corpus, &manifest, |_| {}).unwrap();
        let q = oracle_queries(
            &corpus,
            &planner.normalizer,
            6,
            16,
            &OracleSpec::new(OracleKind::Speed, 1),
            2,
            3,
        )
        .unwrap();
        let long = InversionConfig {
            n_adapt: 12,
            ..InversionConfig::default()
        };
        let snaps = planner
            .invert(&q.preferences, &long, &[5, 12], |_| {})
            .unwrap();
        assert_eq!(
            snaps.iter().map(|s| s.step).collect::<Vec<_>>(),
            vec![5, 12]
        );
        let short = InversionConfig { n_adapt: 5, ..long };
        let direct = planner.invert(&q.preferences, &short, &[], |_| {}).unwrap();
        assert_eq!(direct[0].z_w, snaps[0].z_w);
        assert_eq!(direct[0].z_l, snaps[0].z_l);
    }
}

//! Strict TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FinetuneConfig, RewardTrainConfig};
use crate::env::{OracleKind, OracleSpec};
use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::ple::{InversionConfig, Mask, PriorSpec};
use crate::sampler::GuidanceWeights;
use crate::train::PretrainConfig;

/// Corpus shape for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_episodes: usize,
    pub episode_len: usize,
    pub n_modes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_episodes: 750,
            episode_len: 64,
            n_modes: 4,
        }
    }
}

/// Experiment grid for `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub oracle: OracleSpec,
    pub methods: Vec<String>,
    pub n_query: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Samples drawn per side of every win-rate comparison.
    pub n_samples: usize,
    /// Strength of the reward gradient in classifier-guided sampling.
    pub classifier_scale: f64,
    /// Adaptation budgets at which the inversion and finetuning runs are
    /// snapshotted; empty means only the configured budget.
    pub n_adapt_sweep: Vec<usize>,
    /// Loser weights sampled from each inversion.
    pub u_sweep: Vec<f64>,
    pub prior_sweep: Vec<PriorSpec>,
    /// Each entry retrains the denoiser with that latent width.
    pub ple_dim_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            oracle: OracleSpec::new(OracleKind::Speed, 1),
            methods: super::Method::ALL
                .iter()
                .map(|m| m.name().to_string())
                .collect(),
            n_query: vec![10, 25, 50, 100],
            seeds: (0..5).collect(),
            n_samples: 100,
            classifier_scale: 1.2,
            n_adapt_sweep: Vec::new(),
            u_sweep: Vec::new(),
            prior_sweep: Vec::new(),
            ple_dim_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub session_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
            session_dir: "sessions".into(),
        }
    }
}

/// Everything a subcommand needs. Every table and key is optional; unknown
/// keys are rejected. The top-level `seed` overrides the per-section seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub diffusion_steps: usize,
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub inversion: InversionConfig,
    pub guidance: GuidanceWeights,
    pub reward: RewardTrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            diffusion_steps: 100,
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            inversion: InversionConfig::default(),
            guidance: GuidanceWeights::default(),
            reward: RewardTrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        let seed = config.seed;
        Ok(config.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Sets the master seed and propagates it to every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.inversion.seed = seed;
        self.reward.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn mask(&self) -> Result<Mask> {
        Mask::central(self.data.episode_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be positive".into()));
        }
        if self.data.n_modes < 2 {
            return Err(Error::Config("data.n_modes must be at least 2".into()));
        }
        if self.data.n_episodes == 0 {
            return Err(Error::Config("data.n_episodes must be positive".into()));
        }
        self.mask()?.segment_starts(self.model.horizon)?;
        if self.inversion.n_adapt == 0 {
            return Err(Error::Config("inversion.n_adapt must be positive".into()));
        }
        if !(self.inversion.learning_rate > 0.0) {
            return Err(Error::Config(
                "inversion.learning_rate must be positive".into(),
            ));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::Config("eval.n_samples must be positive".into()));
        }
        for m in &self.eval.methods {
            m.parse::<super::Method>()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.ple_dim, 16);
        assert_eq!(c.guidance.u, 0.02);
        assert_eq!(c.inversion.n_adapt, 5000);
        assert_eq!(c.eval.n_query, vec![10, 25, 50, 100]);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default().with_seed(7);
        c.eval.u_sweep = vec![0.0, 0.02];
        c.eval.prior_sweep = vec![PriorSpec::FixedHalf];
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "bogus = 1",
            "[model]\nwidth = 3",
            "[pretrain]\nlr = 0.1",
            "[nope]",
        ] {
            let err = RunConfig::from_toml_str(doc).unwrap_err();
            assert!(err.to_string().contains("unknown"), "{doc}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[pretrain]\ncontext_dropout_p = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[model]\nhorizon = 40").is_err());
        assert!(RunConfig::from_toml_str("[eval]\nmethods = [\"ppo\"]").is_err());
        assert!(RunConfig::from_toml_str("diffusion_steps = 0").is_err());
    }

    #[test]
    fn readme_example_is_the_default() {
        let readme = include_str!("../../../../README.md");
        let start = readme.find("```toml\n").expect("toml block") + 8;
        let len = readme[start..].find("```").unwrap();
        let c = RunConfig::from_toml_str(&readme[start..start + len]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn master_seed_overrides_sections() {
        let c = RunConfig::from_toml_str("seed = 3\n[inversion]\nseed = 9").unwrap();
        assert_eq!((c.model.seed, c.inversion.seed, c.finetune.seed), (3, 3, 3));
    }
}

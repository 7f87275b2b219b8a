//! Single-file model container.
//!
//! ```text
//! b"PLEDIFF1" | header length (u64 LE) | JSON header | f32 LE payload
//! ```
//!
//! Training runs in f64; the payload is rounded to f32 on save.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::baselines::{LowRankSet, RewardModel};
use crate::env::Normalizer;
use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserParams, Layout};
use crate::ple::Mask;

pub const MAGIC: &[u8; 8] = b"PLEDIFF1";
pub const FORMAT_VERSION: u32 = 1;

/// Type tag plus whatever the tag needs to rebuild its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Denoiser {
        config: DenoiserConfig,
    },
    Reward {
        horizon: usize,
        transition_dim: usize,
        hidden: usize,
    },
    Lora {
        rank: usize,
        targets: Vec<String>,
    },
}

impl ModelSpec {
    pub fn type_tag(&self) -> &'static str {
        match self {
            ModelSpec::Denoiser { .. } => "denoiser",
            ModelSpec::Reward { .. } => "reward",
            ModelSpec::Lora { .. } => "lora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub mask: Mask,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Parameters in layout order, as f64 widened from the stored f32.
    pub params: Vec<f64>,
}

impl Checkpoint {
    fn new(
        model: ModelSpec,
        config: &RunConfig,
        normalizer: &Normalizer,
        mask: &Mask,
        layout: &Layout,
        params: &[f64],
    ) -> Self {
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                model,
                config: config.clone(),
                normalizer: normalizer.clone(),
                mask: mask.clone(),
                layout: layout.clone(),
            },
            params: params.to_vec(),
        }
    }

    pub fn denoiser(
        params: &DenoiserParams,
        config: &RunConfig,
        normalizer: &Normalizer,
        mask: &Mask,
    ) -> Self {
        let spec = ModelSpec::Denoiser {
            config: params.config().clone(),
        };
        Self::new(
            spec,
            config,
            normalizer,
            mask,
            params.layout(),
            params.as_slice(),
        )
    }

    pub fn reward(
        rm: &RewardModel,
        config: &RunConfig,
        normalizer: &Normalizer,
        mask: &Mask,
    ) -> Self {
        let spec = ModelSpec::Reward {
            horizon: rm.horizon(),
            transition_dim: rm.transition_dim(),
            hidden: rm.hidden(),
        };
        Self::new(spec, config, normalizer, mask, rm.layout(), rm.as_slice())
    }

    pub fn lora(
        set: &LowRankSet,
        config: &RunConfig,
        normalizer: &Normalizer,
        mask: &Mask,
    ) -> Self {
        let spec = ModelSpec::Lora {
            rank: set.rank(),
            targets: set.targets().to_vec(),
        };
        Self::new(spec, config, normalizer, mask, set.layout(), set.as_slice())
    }

    fn expect_tag(&self, tag: &str) -> Result<()> {
        let found = self.header.model.type_tag();
        if found != tag {
            return Err(Error::Format(format!(
                "expected a {tag} checkpoint, found {found}"
            )));
        }
        Ok(())
    }

    pub fn to_denoiser(&self) -> Result<DenoiserParams> {
        self.expect_tag("denoiser")?;
        let ModelSpec::Denoiser { config } = &self.header.model else {
            unreachable!()
        };
        let params = DenoiserParams::from_parts(config.clone(), self.params.clone())?;
        if params.layout() != &self.header.layout {
            return Err(Error::Format(
                "stored layout differs from the configured architecture".into(),
            ));
        }
        Ok(params)
    }

    pub fn to_reward(&self) -> Result<RewardModel> {
        self.expect_tag("reward")?;
        let ModelSpec::Reward {
            horizon,
            transition_dim,
            hidden,
        } = self.header.model
        else {
            unreachable!()
        };
        RewardModel::from_parts(horizon, transition_dim, hidden, self.params.clone())
    }

    pub fn to_lora(&self) -> Result<LowRankSet> {
        self.expect_tag("lora")?;
        let ModelSpec::Lora { rank, targets } = &self.header.model else {
            unreachable!()
        };
        LowRankSet::from_parts(
            *rank,
            targets.clone(),
            self.header.layout.clone(),
            self.params.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.len() != self.header.layout.total_len() {
            return Err(Error::shape(
                "checkpoint payload",
                self.header.layout.total_len(),
                self.params.len(),
            ));
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing PLEDIFF1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds remaining {} bytes",
                body.len()
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        header.layout.validate()?;
        let payload = &body[header_len..];
        let expected = header.layout.total_len() * 4;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, layout needs {expected}",
                payload.len()
            )));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self { header, params })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

//! Preference-aligned diffusion trajectory planning.
//!
//! A context-conditioned denoiser is pretrained on reward-free trajectories
//! together with a mapper that embeds masked full trajectories into a
//! low-dimensional preference latent. Pairwise preference labels are then
//! absorbed by optimizing winner/loser latents against the frozen denoiser,
//! and aligned trajectories are drawn with dual classifier-free guidance.

pub mod baselines;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod ple;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use env::{CorpusManifest, FullTrajectory, Normalizer, OracleKind, OracleSpec};
pub use error::{Error, Result};
pub use model::{Context, Denoiser, DenoiserConfig, DenoiserParams, Layout, LayoutEntry};
pub use pipeline::{AdaptedLatents, Checkpoint, EvalReport, Method, Planner, RunConfig};
pub use ple::{InversionConfig, MapperParams, Mask, PriorSpec};
pub use sampler::{Guidance, GuidanceWeights};
pub use schedule::{forward_noise, NoiseSchedule};

//! Low-rank adapters: every targeted kernel `W (m x n)` gains factors
//! `B (m x r)` and `A (r x n)` so the effective kernel is `W + B A`.

use ndarray::{ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{view2, view2_mut, DenoiserParams, Layout, LayoutBuilder, LayoutEntry};

/// Kernels adapted when no filter is given: the second convolution of every
/// residual block.
pub const DEFAULT_TARGETS: &[&str] = &["blocks.*.conv2.w"];
/// Filter selecting every dense and convolution kernel of the denoiser.
pub const ALL_KERNELS: &[&str] = &["time*.w", "conv_in.w", "blocks.*.w", "conv_out.w"];
/// Standard deviation of the initial `A` factor.
const A_INIT_STD: f64 = 0.01;

/// `*` matches any (possibly empty) run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankSet {
    rank: usize,
    targets: Vec<String>,
    layout: Layout,
    flat: Vec<f64>,
}

impl LowRankSet {
    /// Adapters for every kernel of `base` matched by one of `filter`.
    /// `B` starts at zero so the adapted model initially equals `base`.
    pub fn new(
        base: &DenoiserParams,
        rank: usize,
        filter: &[impl AsRef<str>],
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let targets: Vec<&LayoutEntry> = base
            .layout()
            .entries()
            .iter()
            .filter(|e| e.is_matrix() && !e.name.starts_with("mapper."))
            .filter(|e| filter.iter().any(|p| glob_match(p.as_ref(), &e.name)))
            .collect();
        if targets.is_empty() {
            return Err(Error::Config("adapter filter matches no kernels".into()));
        }
        let mut builder = LayoutBuilder::default();
        for e in &targets {
            let (m, n) = (e.shape[0], e.shape[1]);
            if rank > m.min(n) {
                return Err(Error::Config(format!(
                    "rank {rank} exceeds min({m}, {n}) for {}",
                    e.name
                )));
            }
            builder.push(&format!("{}.lora_b", e.name), &[m, rank]);
            builder.push(&format!("{}.lora_a", e.name), &[rank, n]);
        }
        let layout = builder.finish();
        let mut flat = vec![0.0; layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, A_INIT_STD).expect("positive std");
        for e in layout
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(".lora_a"))
        {
            for v in &mut flat[e.range()] {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            rank,
            targets: targets.iter().map(|e| e.name.clone()).collect(),
            layout,
            flat,
        })
    }

    pub fn from_parts(
        rank: usize,
        targets: Vec<String>,
        layout: Layout,
        flat: Vec<f64>,
    ) -> Result<Self> {
        layout.validate()?;
        if flat.len() != layout.total_len() {
            return Err(Error::shape(
                "adapter vector",
                layout.total_len(),
                flat.len(),
            ));
        }
        Ok(Self {
            rank,
            targets,
            layout,
            flat,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Number of trainable adapter parameters.
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub(crate) fn entries(&self, weight: &str) -> Option<(&LayoutEntry, &LayoutEntry)> {
        let b = self.layout.get(&format!("{weight}.lora_b"))?;
        let a = self.layout.get(&format!("{weight}.lora_a"))?;
        Some((b, a))
    }

    /// `(B, A)` for an adapted kernel.
    pub fn factors(&self, weight: &str) -> Option<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)> {
        self.entries(weight)
            .map(|(b, a)| (view2(&self.flat, b), view2(&self.flat, a)))
    }

    /// Base parameters with every `B A` folded into its kernel.
    pub fn merge_into(&self, base: &DenoiserParams) -> DenoiserParams {
        let mut merged = base.clone();
        for target in &self.targets {
            let (b, a) = self.factors(target).expect("own target");
            let delta = b.dot(&a);
            let entry = base.layout().entry(target).clone();
            let mut w = view2_mut(merged.as_mut_slice(), &entry);
            Zip::from(&mut w).and(&delta).for_each(|w, &d| *w += d);
        }
        merged
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Context, Denoiser, DenoiserConfig};
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    #[test]
    fn glob() {
        assert!(glob_match("blocks.*.conv2.w", "blocks.0.conv2.w"));
        assert!(glob_match("blocks.*.conv2.w", "blocks.12.conv2.w"));
        assert!(!glob_match("blocks.*.conv2.w", "blocks.0.conv1.w"));
        assert!(glob_match("time*.w", "time1.w"));
        assert!(!glob_match("time*.w", "time1.b"));
        assert!(glob_match("conv_in.w", "conv_in.w"));
        assert!(glob_match("*", "anything"));
    }

    #[test]
    fn rank_too_large_rejected() {
        let cfg = DenoiserConfig {
            hidden_width: 4,
            n_blocks: 1,
            ..DenoiserConfig::default()
        };
        let base = DenoiserParams::init(&cfg).unwrap();
        assert!(LowRankSet::new(&base, 5, DEFAULT_TARGETS, 0).is_err());
        assert!(LowRankSet::new(&base, 4, DEFAULT_TARGETS, 0).is_ok());
        assert!(LowRankSet::new(&base, 0, DEFAULT_TARGETS, 0).is_err());
    }

    #[test]
    fn all_kernels_filter_skips_mapper_and_biases() {
        let base = DenoiserParams::init(&DenoiserConfig::default()).unwrap();
        let set = LowRankSet::new(&base, 2, ALL_KERNELS, 0).unwrap();
        assert_eq!(set.targets().len(), 4 + 3 * 2);
        assert!(set
            .targets()
            .iter()
            .all(|t| t.ends_with(".w") && !t.starts_with("mapper")));
    }

    #[test]
    fn zero_init_matches_base_and_merge_matches_on_the_fly() {
        let base = DenoiserParams::init(&DenoiserConfig::default()).unwrap();
        let mut set = LowRankSet::new(&base, 4, ALL_KERNELS, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((32, 4), || StandardNormal.sample(&mut rng));
        let z = vec![0.4; 16];
        let ctx = [Context::Embedding(&z), Context::Null];
        let plain = Denoiser::new(&base)
            .predict(x.view(), &[3, 70], &ctx)
            .unwrap();
        let adapted = Denoiser::with_adapters(&base, &set)
            .predict(x.view(), &[3, 70], &ctx)
            .unwrap();
        assert_eq!(plain, adapted);

        for v in set.as_mut_slice() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += 0.05 * n;
        }
        let on_the_fly = Denoiser::with_adapters(&base, &set)
            .predict(x.view(), &[3, 70], &ctx)
            .unwrap();
        let merged = set.merge_into(&base);
        let folded = Denoiser::new(&merged)
            .predict(x.view(), &[3, 70], &ctx)
            .unwrap();
        let err = (&on_the_fly - &folded)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "{err}");
        assert!((&on_the_fly - &plain).iter().any(|v| v.abs() > 1e-6));
    }
}

//! Cosine noise schedule and the closed-form forward (noising) process.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const ALPHA_MIN: f64 = 0.001;
const ALPHA_MAX: f64 = 0.9999;

/// Per-step `alpha` and cumulative `alpha_bar` for a `K`-step diffusion chain.
///
/// Step indices run `0..K`; `alpha_bar[k]` is the product of `alpha[0..=k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008`. Per-step alphas are ratios of
    /// consecutive cumulative values, clamped to `[0.001, 0.9999]`; the stored
    /// cumulative products are recomputed from the clamped alphas.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "diffusion needs at least 2 steps, got {steps}"
            )));
        }
        let k_total = steps as f64;
        let f = |t: f64| {
            let c = ((t / k_total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                * std::f64::consts::FRAC_PI_2)
                .cos();
            c * c
        };
        let f0 = f(0.0);
        let target: Vec<f64> = (0..steps).map(|k| f((k + 1) as f64) / f0).collect();

        let mut alpha = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &ab in &target {
            alpha.push((ab / prev).clamp(ALPHA_MIN, ALPHA_MAX));
            prev = ab;
        }
        let alpha_bar = cumulative_product(&alpha);
        Ok(Self { alpha, alpha_bar })
    }

    /// Builds a schedule from explicit per-step alphas, each in `(0, 1]`.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(
                "alphas must be nonempty and in (0, 1]".into(),
            ));
        }
        let alpha_bar = cumulative_product(&alpha);
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior standard deviation used by ancestral sampling; zero at `k = 0`.
    pub fn posterior_std(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let var = (1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k]) * (1.0 - self.alpha[k]);
        var.max(0.0).sqrt()
    }

    pub(crate) fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::Config(format!(
                "step index {k} out of range for {} steps",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn cumulative_product(alpha: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect()
}

/// `tau_k = sqrt(alpha_bar_k) * tau_0 + sqrt(1 - alpha_bar_k) * eps`.
pub fn forward_noise(
    tau_0: ArrayView2<f64>,
    k: usize,
    eps: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    schedule.check_step(k)?;
    if tau_0.dim() != eps.dim() {
        let (r0, c0) = tau_0.dim();
        let (r1, c1) = eps.dim();
        let (expected, actual) = if r0 != r1 { (r0, r1) } else { (c0, c1) };
        return Err(Error::shape("noise matrix", expected, actual));
    }
    let ab = schedule.alpha_bar[k];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Array2::zeros(tau_0.dim());
    Zip::from(&mut out)
        .and(&tau_0)
        .and(&eps)
        .for_each(|o, &x, &e| *o = a * x + b * e);
    Ok(out)
}

/// Row-block variant used by the batched training loops: `rows` holds
/// `k.len()` stacked trajectories of `horizon` rows each.
pub(crate) fn forward_noise_rows(
    tau_0: ArrayView2<f64>,
    ks: &[usize],
    eps: ArrayView2<f64>,
    horizon: usize,
    schedule: &NoiseSchedule,
) -> Array2<f64> {
    let mut out = Array2::zeros(tau_0.dim());
    for (i, &k) in ks.iter().enumerate() {
        let ab = schedule.alpha_bar[k];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let rows = i * horizon..(i + 1) * horizon;
        Zip::from(out.slice_mut(ndarray::s![rows.clone(), ..]))
            .and(tau_0.slice(ndarray::s![rows.clone(), ..]))
            .and(eps.slice(ndarray::s![rows, ..]))
            .for_each(|o, &x, &e| *o = a * x + b * e);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cosine_100_decreasing_and_small_tail() {
        let s = NoiseSchedule::cosine(100).unwrap();
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[99] < 0.01);
        assert!(s.alpha_bar()[0] > 0.99);
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        for k in [2usize, 3, 10, 50, 100, 1000] {
            let s = NoiseSchedule::cosine(k).unwrap();
            let mut acc = 1.0;
            for j in 0..k {
                acc *= s.alpha()[j];
                assert!((s.alpha_bar()[j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_step_alphas_in_open_unit_interval() {
        let s = NoiseSchedule::cosine(2).unwrap();
        assert!(s.alpha().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn rejects_single_step() {
        assert!(NoiseSchedule::cosine(1).is_err());
    }

    #[test]
    fn identity_when_no_noise() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.5]).unwrap();
        let tau = array![[1.0, -2.0], [0.5, 3.0]];
        let eps = Array2::zeros((2, 2));
        let out = forward_noise(tau.view(), 0, eps.view(), &s).unwrap();
        assert_eq!(out, tau);
    }

    #[test]
    fn zero_signal_scales_noise() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let tau = Array2::zeros((3, 2));
        let eps = array![[1.0, 2.0], [-1.0, 0.5], [0.0, 4.0]];
        let out = forward_noise(tau.view(), 4, eps.view(), &s).unwrap();
        let scale = (1.0 - s.alpha_bar()[4]).sqrt();
        assert_eq!(out, eps.mapv(|e| scale * e));
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let err = forward_noise(
            Array2::zeros((3, 2)).view(),
            0,
            Array2::zeros((4, 2)).view(),
            &s,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                expected: 3,
                actual: 4,
                ..
            }
        ));
    }

    #[test]
    fn posterior_std_zero_at_first_step() {
        let s = NoiseSchedule::cosine(100).unwrap();
        assert_eq!(s.posterior_std(0), 0.0);
        assert!(s.posterior_std(50) > 0.0);
    }

    #[test]
    fn composed_chain_matches_marginal() {
        // Monte-Carlo: iterate x_j = sqrt(a_j) x_{j-1} + sqrt(1-a_j) n_j and
        // compare against the closed-form marginal's mean and variance.
        let s = NoiseSchedule::cosine(20).unwrap();
        let k = 12;
        let x0 = 0.7;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = x0;
            for j in 0..=k {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = s.alpha()[j].sqrt() * x + (1.0 - s.alpha()[j]).sqrt() * z;
            }
            samples.push(x);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mu = s.alpha_bar()[k].sqrt() * x0;
        let sigma2 = 1.0 - s.alpha_bar()[k];
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean);
        assert!((var - sigma2).abs() < 3.0 * se_var);
    }
}

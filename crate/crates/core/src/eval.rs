//! Embedding-space metrics and the procedural dataset.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::latent::{Example, DEFAULT_FRAME_RATE_HZ};
use crate::linalg;
use crate::oracle::Grammar;
use crate::rng::{self, Rng};

/// Mean and (population) covariance of a set of vectors.
pub fn moments(xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = xs.first() else { bail!(Empty, "no vectors") };
    let d = first.len();
    if xs.iter().any(|x| x.len() != d) {
        bail!(Shape, "vectors differ in length");
    }
    let n = xs.len() as f64;
    let mut mu = vec![0.0; d];
    for x in xs {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for x in xs {
        for i in 0..d {
            let di = x[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (x[j] - mu[j]) / n;
            }
        }
    }
    Ok((mu, cov))
}

/// Fréchet distance between Gaussians with the given moments.
pub fn frechet_from_moments(mu_a: &[f64], cov_a: &[f64], mu_b: &[f64], cov_b: &[f64]) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        bail!(Shape, "moment dimensions disagree");
    }
    let singular = |c: &[f64]| -> Result<bool> {
        let (w, _) = linalg::symmetric_eigen(c, d)?;
        let top = w.iter().cloned().fold(0.0, f64::max);
        Ok(w.iter().any(|&x| x <= 1e-12 * top.max(1e-300)))
    };
    let (mut a, mut b) = (cov_a.to_vec(), cov_b.to_vec());
    if singular(&a)? || singular(&b)? {
        for i in 0..d {
            a[i * d + i] += 1e-6;
            b[i * d + i] += 1e-6;
        }
    }
    let ah = linalg::sqrtm_psd(&a, d)?;
    let inner = linalg::matmul(&linalg::matmul(&ah, &b, d), &ah, d);
    let cross = linalg::trace(&linalg::sqrtm_psd(&inner, d)?, d);
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let fd = mean_term + linalg::trace(&a, d) + linalg::trace(&b, d) - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// `‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_aΣ_b)^{1/2})`; when either covariance is
/// singular both are regularized by `1e−6·I`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        bail!(InvalidArgument, "each set needs at least two vectors");
    }
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

/// Cosine of two unit vectors.
pub fn alignment_score(e_text: &[f64], e_audio: &[f64]) -> f64 {
    e_text.iter().zip(e_audio).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DatasetConfig {
    pub size: usize,
    pub channels: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub grammar: Grammar,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { size: 4096, channels: 8, min_frames: 16, max_frames: 256, grammar: Grammar::default() }
    }
}

/// Seeded procedural records: a random prompt, a length uniform in
/// `[min_frames, max_frames]` and the prompt's rendering.
pub fn generate_dataset(rng: &mut Rng, config: &DatasetConfig) -> Result<Vec<Example>> {
    config.grammar.validate()?;
    if config.min_frames == 0 || config.min_frames > config.max_frames || config.channels == 0 {
        bail!(InvalidArgument, "invalid dataset length range or channel count");
    }
    let n = config.grammar.num_prompts();
    (0..config.size)
        .map(|_| {
            let p = config.grammar.prompt(rng::int_in(rng, 0, n - 1));
            let len = rng::int_in(rng, config.min_frames, config.max_frames);
            let mut latent = config.grammar.render(p, len, config.channels, rng)?;
            latent.frame_rate_hz = DEFAULT_FRAME_RATE_HZ;
            Ok(Example { tokens: config.grammar.tokens(p), latent })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_closed_form() {
        // population statistics exactly N(0,1) and N(1,1): ±1 samples
        let a: Vec<Vec<f64>> = vec![vec![-1.0], vec![1.0]];
        let b: Vec<Vec<f64>> = vec![vec![0.0], vec![2.0]];
        let fd = frechet_distance(&a, &b).unwrap();
        // (μa−μb)² + (σa−σb)² = 1
        assert!((fd - 1.0).abs() < 1e-6, "{fd}");
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        assert!(frechet_distance(&a[..1], &b).is_err());
    }

    #[test]
    fn scalar_variances() {
        // σa = 2, σb = 3 → (2−3)² = 1 plus mean term 4
        let fd = frechet_from_moments(&[0.0], &[4.0], &[2.0], &[9.0]).unwrap();
        let expect = 4.0 + (2.0f64 - 3.0).powi(2);
        assert!((fd - expect).abs() < 1e-12);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let cov = [1.0, 1.0, 1.0, 1.0];
        let fd = frechet_from_moments(&[0.0, 0.0], &cov, &[1.0, 0.0], &cov).unwrap();
        assert!((fd - 1.0).abs() < 1e-9, "{fd}");
        assert!(frechet_from_moments(&[0.0], &[0.0], &[0.0], &[0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment_score(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
        assert_eq!(alignment_score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(alignment_score(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
    }

    #[test]
    fn dataset_is_seeded_and_in_range() {
        let cfg = DatasetConfig { size: 200, min_frames: 16, max_frames: 40, ..Default::default() };
        let a = generate_dataset(&mut rng::seeded(5), &cfg).unwrap();
        let b = generate_dataset(&mut rng::seeded(5), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|e| (16..=40).contains(&e.latent.len()) && e.latent.channels() == 8 && e.tokens.len() == 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frechet_nonnegative_and_symmetric(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let mut r = rng::seeded(seed);
            let a: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng::normal(&mut r)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| 0.5 * rng::normal(&mut r) + shift).collect()).collect();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        }
    }
}

//! Forward noising, the single reverse step and the full sampling loop.

use crate::denoiser::{DenoiserModel, Mode, PocketMask};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::trainer::NormStats;

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(
    x0: &EmbeddingMatrix,
    t: usize,
    eps: &EmbeddingMatrix,
    sched: &NoiseSchedule,
) -> Result<EmbeddingMatrix> {
    x0.check_same_shape(eps, "q_sample noise")?;
    let (a, b) = sched.marginal_coeffs(t)?;
    Ok(combine(x0, a, eps, b))
}

/// Mean of the reverse transition given a noise estimate:
/// `(x_t − (1−α_t)/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn posterior_mean(
    x_t: &EmbeddingMatrix,
    eps_pred: &EmbeddingMatrix,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<EmbeddingMatrix> {
    x_t.check_same_shape(eps_pred, "posterior_mean noise estimate")?;
    sched.check_step(t)?;
    let alpha = sched.alpha(t);
    let inv = 1.0 / alpha.sqrt();
    let c = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(combine(x_t, inv, eps_pred, -c * inv))
}

/// One ancestral step: posterior mean plus `σ_t·noise`.
pub fn reverse_step(
    x_t: &EmbeddingMatrix,
    eps_pred: &EmbeddingMatrix,
    t: usize,
    sched: &NoiseSchedule,
    noise: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    x_t.check_same_shape(noise, "reverse_step noise")?;
    let mean = posterior_mean(x_t, eps_pred, t, sched)?;
    let sigma = sched.sigma(t);
    if sigma == 0.0 {
        return Ok(mean);
    }
    Ok(combine(&mean, 1.0, noise, sigma))
}

// a·x + b·y, evaluated in f64 per entry.
fn combine(x: &EmbeddingMatrix, a: f64, y: &EmbeddingMatrix, b: f64) -> EmbeddingMatrix {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&u, &v)| (a * f64::from(u) + b * f64::from(v)) as f32)
        .collect();
    EmbeddingMatrix::from_raw(x.rows(), x.cols(), data)
}

/// Anything that can estimate the noise in a normalized `x_t`.
pub trait NoisePredictor {
    fn d_emb(&self) -> usize;

    fn norm_stats(&self) -> &NormStats;

    /// `z` is already normalized.
    fn predict(
        &self,
        x_t: &EmbeddingMatrix,
        z: &EmbeddingMatrix,
        mask: &PocketMask,
        t: usize,
    ) -> Result<EmbeddingMatrix>;
}

impl NoisePredictor for DenoiserModel {
    fn d_emb(&self) -> usize {
        self.config.d_emb
    }

    fn norm_stats(&self) -> &NormStats {
        &self.norm_stats
    }

    fn predict(
        &self,
        x_t: &EmbeddingMatrix,
        z: &EmbeddingMatrix,
        mask: &PocketMask,
        t: usize,
    ) -> Result<EmbeddingMatrix> {
        self.predict_noise(x_t, z, mask, t, Mode::Eval)
    }
}

/// Samples a binder embedding of `length` rows for the raw receptor `z`.
///
/// Runs entirely in normalized space: `z` is normalized on entry, `x_T` is
/// standard normal, and the result is de-normalized once at the end. Random
/// draws are `x_T` first, then the step noise for `t = T, …, 2`.
pub fn generate<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &EmbeddingMatrix,
    mask: &PocketMask,
    length: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if length == 0 {
        return Err(Error::invalid("sample length must be at least 1"));
    }
    let d = predictor.d_emb();
    if z.cols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: z.cols() });
    }
    if mask.len() != z.rows() {
        return Err(Error::shape(format!(
            "pocket mask length {} does not match receptor length {}",
            mask.len(),
            z.rows()
        )));
    }
    let stats = predictor.norm_stats();
    let zn = stats.normalize(z)?;
    let mut rng = seed::rng(seed);
    let mut x = EmbeddingMatrix::randn(length, d, &mut rng);
    for t in (1..=sched.timesteps()).rev() {
        let eps = predictor.predict(&x, &zn, mask, t)?;
        x = if t > 1 {
            let noise = EmbeddingMatrix::randn(length, d, &mut rng);
            reverse_step(&x, &eps, t, sched, &noise)?
        } else {
            posterior_mean(&x, &eps, t, sched)?
        };
    }
    if !x.is_finite() {
        return Err(Error::SamplingDivergence(
            "non-finite values in the generated embedding".into(),
        ));
    }
    let out = stats.denormalize(&x)?;
    if !out.is_finite() {
        return Err(Error::SamplingDivergence(
            "non-finite values after de-normalization".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(1000, 0.008).unwrap()
    }

    fn mat(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        EmbeddingMatrix::randn(rows, cols, &mut seed::rng(seed))
    }

    #[test]
    fn q_sample_zero_noise_and_zero_signal() {
        let s = sched();
        let x0 = mat(3, 4, 1);
        let eps = mat(3, 4, 2);
        let zeros = EmbeddingMatrix::zeros(3, 4);
        let (a, b) = s.marginal_coeffs(500).unwrap();
        let xt = q_sample(&x0, 500, &zeros, &s).unwrap();
        for (v, x) in xt.data().iter().zip(x0.data()) {
            assert!((f64::from(*v) - a * f64::from(*x)).abs() < 1e-6);
        }
        let xt = q_sample(&zeros, 500, &eps, &s).unwrap();
        for (v, e) in xt.data().iter().zip(eps.data()) {
            assert!((f64::from(*v) - b * f64::from(*e)).abs() < 1e-6);
        }
        assert!(q_sample(&x0, 500, &mat(2, 4, 3), &s).is_err());
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = sched();
        let x0 = EmbeddingMatrix::new(2, 2, vec![1.5, -0.5, 0.25, 2.0]).unwrap();
        let (a, b) = s.marginal_coeffs(500).unwrap();
        let n = 10_000;
        let mut rng = seed::rng(11);
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let eps = EmbeddingMatrix::randn(2, 2, &mut rng);
            let xt = q_sample(&x0, 500, &eps, &s).unwrap();
            for (i, &v) in xt.data().iter().enumerate() {
                sum[i] += f64::from(v);
                sq[i] += f64::from(v) * f64::from(v);
            }
        }
        let var_true = b * b;
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se = (var_true / n as f64).sqrt();
            assert!((mean - a * f64::from(x0.data()[i])).abs() < 3.0 * se, "mean {i}");
            assert!((var / var_true - 1.0).abs() < 0.05, "var {i}");
        }
    }

    #[test]
    fn posterior_mean_recovers_x0_at_first_step() {
        let s = sched();
        let x0 = mat(4, 6, 5);
        let eps = mat(4, 6, 6);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let mean = posterior_mean(&x1, &eps, 1, &s).unwrap();
        assert!(mean.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn posterior_mean_zero_estimate_rescales() {
        let s = sched();
        let x = mat(2, 3, 7);
        let m = posterior_mean(&x, &EmbeddingMatrix::zeros(2, 3), 300, &s).unwrap();
        let r = 1.0 / s.alpha(300).sqrt();
        for (v, u) in m.data().iter().zip(x.data()) {
            assert!((f64::from(*v) - r * f64::from(*u)).abs() < 1e-5);
        }
    }

    #[test]
    fn posterior_mean_matches_second_implementation() {
        // Recomputed from ᾱ_t and ᾱ_{t-1} instead of the stored α_t.
        let s = sched();
        let t = 37;
        let x0 = mat(3, 5, 8);
        let eps = mat(3, 5, 9);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let m = posterior_mean(&xt, &eps, t, &s).unwrap();
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let alpha = ab / ab_prev;
        for i in 0..xt.data().len() {
            let x = f64::from(xt.data()[i]);
            let e = f64::from(eps.data()[i]);
            let want = (x - (1.0 - alpha) / (1.0 - ab).sqrt() * e) / alpha.sqrt();
            assert!((f64::from(m.data()[i]) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn reverse_step_first_step_is_deterministic() {
        let s = sched();
        let x = mat(2, 3, 10);
        let e = mat(2, 3, 11);
        let mean = posterior_mean(&x, &e, 1, &s).unwrap();
        assert_eq!(reverse_step(&x, &e, 1, &s, &mat(2, 3, 12)).unwrap(), mean);
        let mean = posterior_mean(&x, &e, 400, &s).unwrap();
        let zero = EmbeddingMatrix::zeros(2, 3);
        assert_eq!(reverse_step(&x, &e, 400, &s, &zero).unwrap(), mean);
    }

    #[test]
    fn reverse_step_noise_scale() {
        let s = sched();
        let t = 600;
        let x = mat(1, 2, 13);
        let e = mat(1, 2, 14);
        let mut rng = seed::rng(15);
        let n = 10_000;
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let noise = EmbeddingMatrix::randn(1, 2, &mut rng);
            let y = reverse_step(&x, &e, t, &s, &noise).unwrap();
            for i in 0..2 {
                let v = f64::from(y.data()[i]);
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            assert!((std / s.sigma(t) - 1.0).abs() < 0.05);
        }
    }

    /// Composing single-step transitions reproduces the closed-form marginal.
    #[test]
    fn chained_forward_matches_marginal() {
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let x0 = [0.8f64, -1.2];
        let n = 10_000;
        let mut rng = seed::rng(16);
        for t in [1usize, 10, 20] {
            let mut sum = [0.0f64; 2];
            let mut sq = [0.0f64; 2];
            for _ in 0..n {
                for i in 0..2 {
                    let mut x = x0[i];
                    for k in 1..=t {
                        let e: f64 = rng.sample(StandardNormal);
                        x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * e;
                    }
                    sum[i] += x;
                    sq[i] += x * x;
                }
            }
            let ab = s.alpha_bar(t);
            for i in 0..2 {
                let mean = sum[i] / n as f64;
                let var = sq[i] / n as f64 - mean * mean;
                let se = ((1.0 - ab) / n as f64).sqrt();
                assert!((mean - ab.sqrt() * x0[i]).abs() < 4.0 * se, "t={t}");
                assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t}");
            }
        }
    }

    /// Returns the exact noise relating `x_t` to a planted clean sample.
    struct Oracle {
        x0: EmbeddingMatrix,
        sched: NoiseSchedule,
        stats: NormStats,
    }

    impl NoisePredictor for Oracle {
        fn d_emb(&self) -> usize {
            self.x0.cols()
        }

        fn norm_stats(&self) -> &NormStats {
            &self.stats
        }

        fn predict(
            &self,
            x_t: &EmbeddingMatrix,
            _z: &EmbeddingMatrix,
            _mask: &PocketMask,
            t: usize,
        ) -> Result<EmbeddingMatrix> {
            let (a, b) = self.sched.marginal_coeffs(t)?;
            Ok(combine(x_t, 1.0 / b, &self.x0, -a / b))
        }
    }

    #[test]
    fn oracle_recovers_planted_sample() {
        let x0 = mat(15, 8, 20);
        let z = mat(5, 8, 21);
        let mask = PocketMask::all(5).unwrap();
        for (steps, tol) in [(1usize, 1e-4f32), (50, 1e-3)] {
            let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
            let oracle = Oracle {
                x0: x0.clone(),
                sched: sched.clone(),
                stats: NormStats::identity(8),
            };
            let out = generate(&oracle, &z, &mask, 15, &sched, 3).unwrap();
            assert!(out.max_abs_diff(&x0) < tol, "{steps} steps");
        }
    }

    #[test]
    fn generate_is_deterministic_with_model() {
        let cfg = DenoiserConfig {
            timesteps: 10,
            ..DenoiserConfig::toy()
        };
        let model = DenoiserModel::init(cfg).unwrap();
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let z = mat(6, 32, 30);
        let mask = PocketMask::from_indices(6, &[1, 2]).unwrap();
        let a = generate(&model, &z, &mask, 15, &sched, 42).unwrap();
        let b = generate(&model, &z, &mask, 15, &sched, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (15, 32));
        let c = generate(&model, &z, &mask, 15, &sched, 43).unwrap();
        assert_ne!(a, c);
    }

    struct Exploding;

    impl NoisePredictor for Exploding {
        fn d_emb(&self) -> usize {
            2
        }

        fn norm_stats(&self) -> &NormStats {
            static STATS: std::sync::OnceLock<NormStats> = std::sync::OnceLock::new();
            STATS.get_or_init(|| NormStats::identity(2))
        }

        fn predict(
            &self,
            x_t: &EmbeddingMatrix,
            _z: &EmbeddingMatrix,
            _mask: &PocketMask,
            _t: usize,
        ) -> Result<EmbeddingMatrix> {
            Ok(EmbeddingMatrix::from_raw(
                x_t.rows(),
                2,
                vec![f32::MAX; x_t.rows() * 2],
            ))
        }
    }

    #[test]
    fn non_finite_samples_are_reported() {
        let sched = NoiseSchedule::cosine(5, 0.008).unwrap();
        let z = EmbeddingMatrix::zeros(3, 2);
        let mask = PocketMask::all(3).unwrap();
        let err = generate(&Exploding, &z, &mask, 4, &sched, 0).unwrap_err();
        assert!(matches!(err, Error::SamplingDivergence(_)), "{err}");
    }
}

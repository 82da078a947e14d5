//! Evaluation metrics: standardized-MSE based Q^2, one-sigma coverage
//! deviation, and parameter mean absolute error.


use crate::error::{Error, Result};

/// `100 * (1 - mean((pred - target)^2) / var(target))` with the population
/// variance in the denominator.
pub fn q2(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            got: pred.len(),
        });
    }
    if target.len() < 2 {
        return Err(Error::InvalidArgument {
            what: "q2 needs at least 2 targets",
        });
    }
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let var = target.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mse = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    Ok(100.0 * (1.0 - mse / var))
}

/// `100 * (fraction of targets within one predictive standard deviation)
/// - 68`; signed, so over- and under-confidence keep their direction.
pub fn coverage_deviation(mean: &[f64], sigma: &[f64], target: &[f64]) -> Result<f64> {
    if mean.len() != target.len() || sigma.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            got: mean.len().min(sigma.len()),
        });
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument {
            what: "sigma must be positive elementwise",
        });
    }
    let hits = mean
        .iter()
        .zip(sigma.iter())
        .zip(target.iter())
        .filter(|((m, s), t)| (*t - *m).abs() <= **s)
        .count();
    Ok(100.0 * hits as f64 / target.len() as f64 - 68.0)
}

/// Mean absolute error between estimated and true parameters; callers
/// exclude frozen parameters before calling.
pub fn param_mae(estimated: &[f64], truth: &[f64]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: estimated.len(),
        });
    }
    if estimated.is_empty() {
        return Err(Error::InvalidArgument {
            what: "param_mae needs at least one parameter",
        });
    }
    Ok(estimated
        .iter()
        .zip(truth.iter())
        .map(|(e, t)| (e - t).abs())
        .sum::<f64>()
        / truth.len() as f64)
}

/// Metric bundle reported by evaluation runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub q2_output: Option<f64>,
    pub q2_latent: Option<f64>,
    pub coverage_deviation: Option<f64>,
    pub param_mae: Option<f64>,
    pub n_outputs: usize,
    pub n_latent: usize,
}

/// Mean and (population) standard deviation of repeated metric values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_scores_100() {
        let t = [0.0, 1.0, 2.0, 5.0];
        assert_eq!(q2(&t, &t).unwrap(), 100.0);
    }

    #[test]
    fn constant_mean_prediction_scores_0() {
        let t = [0.0, 1.0, 2.0];
        let pred = [1.0, 1.0, 1.0];
        assert!((q2(&pred, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_q2() {
        // population variance of [0,1,2] is 2/3; mse of [0,1,3] is 1/3
        let v = q2(&[0.0, 1.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((v - 50.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_variance_is_an_error() {
        assert!(matches!(
            q2(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn coverage_extremes() {
        let t = [1.0, 2.0, 3.0];
        let s = [0.5, 0.5, 0.5];
        assert!((coverage_deviation(&t, &s, &t).unwrap() - 32.0).abs() < 1e-12);
        let far = [100.0, 200.0, 300.0];
        assert!((coverage_deviation(&far, &s, &t).unwrap() + 68.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_of_standard_normal_is_near_nominal() {
        let mut rng = Rng::new(12);
        let n = 100_000;
        let target: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = vec![0.0; n];
        let sigma = vec![1.0; n];
        let dev = coverage_deviation(&mean, &sigma, &target).unwrap();
        assert!((dev - 0.27).abs() < 0.5, "deviation {dev}");
    }

    #[test]
    fn mae_cases() {
        assert_eq!(param_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(param_mae(&[1.5, 2.5], &[1.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(
            param_mae(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, .. ProptestConfig::default() })]

        #[test]
        fn q2_is_invariant_under_shared_affine_maps(
            seed in 0u64..1000,
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = Rng::new(seed);
            let target: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
            let pred: Vec<f64> = target.iter().map(|t| t + 0.3 * rng.normal()).collect();
            let base = q2(&pred, &target).unwrap();
            let pred2: Vec<f64> = pred.iter().map(|p| scale * p + shift).collect();
            let target2: Vec<f64> = target.iter().map(|t| scale * t + shift).collect();
            let mapped = q2(&pred2, &target2).unwrap();
            prop_assert!((base - mapped).abs() < 1e-6, "{} vs {}", base, mapped);
        }

        #[test]
        fn coverage_is_nondecreasing_in_sigma(seed in 0u64..1000, s1 in 0.1f64..2.0, ds in 0.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let target: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
            let mean = vec![0.0; 50];
            let lo = coverage_deviation(&mean, &vec![s1; 50], &target).unwrap();
            let hi = coverage_deviation(&mean, &vec![s1 + ds; 50], &target).unwrap();
            prop_assert!(hi >= lo);
        }
    }
}

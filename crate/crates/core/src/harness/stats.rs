//! Student-t confidence intervals over trials.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ConfidenceInterval {
    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

/// Two-sided 95% interval `mean +- t(0.975, n-1) * s / sqrt(n)`.
pub fn confidence_interval(samples: &[f64]) -> Result<ConfidenceInterval> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("confidence interval samples"));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * var.sqrt() / nf.sqrt();
    Ok(ConfidenceInterval {
        mean,
        lo: mean - half,
        hi: mean + half,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_variance() {
        let ci = confidence_interval(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((ci.mean, ci.lo, ci.hi), (0.5, 0.5, 0.5));
    }

    #[test]
    fn two_samples_match_t_table() {
        // df = 1: t = 12.7062, s = 0.7071
        let ci = confidence_interval(&[0.0, 1.0]).unwrap();
        assert!((ci.mean - 0.5).abs() < 1e-12);
        let expected = 12.7062 * (0.5f64.sqrt() / 2f64.sqrt());
        assert!((ci.half_width() - expected).abs() < 1e-3, "{}", ci.half_width());
        assert!((ci.half_width() - 6.353).abs() < 1e-3);
    }

    #[test]
    fn five_samples_match_t_table() {
        // df = 4: t = 2.7764
        let xs = [0.1, 0.2, 0.3, 0.4, 0.5];
        let s = (0.025f64).sqrt();
        let ci = confidence_interval(&xs).unwrap();
        assert!((ci.half_width() - 2.7764 * s / 5f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            confidence_interval(&[1.0]),
            Err(Error::TooFewSamples { needed: 2, got: 1 })
        ));
        assert!(confidence_interval(&[]).is_err());
        assert!(confidence_interval(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn affine_equivariance(
            xs in prop::collection::vec(-10.0f64..10.0, 2..12),
            a in -5.0f64..5.0,
            c in 0.01f64..5.0,
        ) {
            let base = confidence_interval(&xs).unwrap();
            let ys: Vec<f64> = xs.iter().map(|x| a + c * x).collect();
            let moved = confidence_interval(&ys).unwrap();
            let tol = 1e-9 * (1.0 + a.abs() + c * 10.0);
            prop_assert!((moved.mean - (a + c * base.mean)).abs() < tol);
            prop_assert!((moved.lo - (a + c * base.lo)).abs() < tol * 10.0);
            prop_assert!((moved.hi - (a + c * base.hi)).abs() < tol * 10.0);
        }
    }
}

//! Iterative nullspace projection.
//!
//! Each iteration trains a probe on the current data, takes its unit weight
//! vector as the next basis vector and then ablates that direction from the
//! data (`alpha = 1`) before the next iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{probe_accuracy, probe_direction, train_probe, LabeledVectorSet, ProbeConfig, Provenance};
use crate::subspace::{orthogonalize_against, NumberSubspace};
use crate::types::Number;

/// Allowed label imbalance in INLP training data, as a fraction of its size.
pub const BALANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpIteration {
    pub basis_vector_index: usize,
    pub training_accuracy: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpReport {
    pub provenance: Provenance,
    pub requested_k: usize,
    pub iterations: Vec<InlpIteration>,
    pub orthonormality_defect: f64,
    /// Set when probe training degenerated before `requested_k` vectors.
    pub degenerated: Option<String>,
}

impl InlpReport {
    pub fn is_complete(&self) -> bool {
        self.degenerated.is_none() && self.iterations.len() == self.requested_k
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn check_balanced(data: &LabeledVectorSet) -> Result<()> {
    let singular = data.count(Number::Singular);
    let plural = data.count(Number::Plural);
    let gap = singular.abs_diff(plural) as f64;
    if singular == 0 || plural == 0 || gap > BALANCE_TOLERANCE * data.len() as f64 {
        return Err(Error::Unbalanced { singular, plural });
    }
    Ok(())
}

/// Runs `k` INLP iterations. Iteration `j` (0-based) trains with seed
/// `probe_config.seed + j`.
///
/// When probe training degenerates after at least one basis vector was
/// found, the shorter basis is returned and the report carries the reason.
pub fn find_number_subspace(
    data: &LabeledVectorSet,
    k: usize,
    probe_config: &ProbeConfig,
    heldout: &LabeledVectorSet,
) -> Result<(NumberSubspace, InlpReport)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    check_balanced(data)?;
    if heldout.is_empty() {
        return Err(Error::EmptyData);
    }
    if heldout.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: heldout.dim(),
        });
    }
    if k > data.dim() {
        return Err(Error::InvalidArgument(format!(
            "k={k} exceeds dimension {}",
            data.dim()
        )));
    }

    let mut train = data.clone();
    let mut held = heldout.clone();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut iterations = Vec::with_capacity(k);
    let mut degenerated = None;

    for j in 0..k {
        let cfg = ProbeConfig {
            seed: probe_config.seed.wrapping_add(j as u64),
            ..*probe_config
        };
        let step = train_probe(&train, &cfg).and_then(|probe| {
            let training_accuracy = probe_accuracy(&probe, &train)?;
            let heldout_accuracy = probe_accuracy(&probe, &held)?;
            let mut direction = probe_direction(&probe)?;
            // The ablated data has no variance along earlier vectors, but the
            // standardized fit can still leak weight onto them.
            let remaining = orthogonalize_against(&mut direction, &basis);
            if remaining.is_nan() || remaining <= 1e-8 {
                return Err(Error::ZeroWeight);
            }
            direction.iter_mut().for_each(|x| *x /= remaining);
            Ok((direction, training_accuracy, heldout_accuracy))
        });
        match step {
            Ok((direction, training_accuracy, heldout_accuracy)) => {
                train.project_out(&direction);
                held.project_out(&direction);
                basis.push(direction);
                iterations.push(InlpIteration {
                    basis_vector_index: j,
                    training_accuracy,
                    heldout_accuracy,
                });
            }
            Err(e) if j > 0 => {
                degenerated = Some(format!("iteration {j}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let subspace = NumberSubspace::new(basis)?;
    let report = InlpReport {
        provenance: data.provenance(),
        requested_k: k,
        iterations,
        orthonormality_defect: subspace.orthonormality_defect(),
        degenerated,
    };
    Ok((subspace, report))
}

/// Accuracy of a fresh probe trained on one stratified half of the ablated
/// `heldout` set and evaluated on the other half.
pub fn residual_probe_accuracy(
    s: &NumberSubspace,
    heldout: &LabeledVectorSet,
    probe_config: &ProbeConfig,
) -> Result<f64> {
    let ablated = heldout.ablated(s, s.k())?;
    let (train, test) = ablated.split_stratified();
    let probe = train_probe(&train, probe_config)?;
    probe_accuracy(&probe, &test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::tests::{clusters, PROV};
    use crate::subspace::{dot, random_subspace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Labels carried by coordinate 0 only: clusters at `[+-5, 0, ...]` plus
    /// small isotropic noise.
    fn axis_data(n_per: usize, d: usize, seed: u64) -> LabeledVectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let label = if i % 2 == 0 { Number::Singular } else { Number::Plural };
            let mut v: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
            v[0] += 5.0 * label.sign();
            vectors.push(v);
            labels.push(label);
        }
        LabeledVectorSet::new(vectors, labels, PROV).unwrap()
    }

    /// Number signal spread over several axes with decreasing strength.
    fn spread_data(n_per: usize, d: usize, seed: u64) -> LabeledVectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let label = if i % 2 == 0 { Number::Singular } else { Number::Plural };
            let mut v: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
            for (a, strength) in [3.0, 1.5, 1.0, 0.6].into_iter().enumerate() {
                v[a] += strength * label.sign();
            }
            vectors.push(v);
            labels.push(label);
        }
        LabeledVectorSet::new(vectors, labels, PROV).unwrap()
    }

    #[test]
    fn single_axis_signal_is_found_then_erased() {
        let data = axis_data(200, 10, 1);
        let heldout = axis_data(200, 10, 2);
        let (s, report) = find_number_subspace(&data, 2, &ProbeConfig::default(), &heldout).unwrap();
        assert_eq!(s.k(), 2);
        assert!(s.vector(0)[0].abs() >= 0.99, "{:?}", s.vector(0));
        let second = report.iterations[1].heldout_accuracy;
        assert!((0.40..=0.60).contains(&second), "iteration 2 accuracy {second}");
        assert!(report.iterations[0].heldout_accuracy == 1.0);
        assert!(report.is_complete());
    }

    #[test]
    fn basis_is_orthonormal_and_prefix_deterministic() {
        let data = spread_data(150, 12, 3);
        let heldout = spread_data(150, 12, 4);
        let cfg = ProbeConfig {
            seed: 7,
            ..ProbeConfig::default()
        };
        let (s8, r8) = find_number_subspace(&data, 8, &cfg, &heldout).unwrap();
        let (s9, _) = find_number_subspace(&data, 9, &cfg, &heldout).unwrap();
        assert!(r8.orthonormality_defect <= 1e-5);
        assert_eq!(s8.basis(), &s9.basis()[..8]);
        for j in 0..8 {
            for i in 0..j {
                assert!(dot(s8.vector(j), s8.vector(i)).abs() <= 1e-5);
            }
        }
        for w in r8.iterations.windows(2) {
            assert!(w[1].heldout_accuracy <= w[0].heldout_accuracy + 0.05);
        }
    }

    #[test]
    fn residual_accuracy_examples() {
        let heldout = axis_data(200, 6, 5);
        let cfg = ProbeConfig::default();
        let full = random_subspace(6, 6, 0).unwrap();
        let acc = residual_probe_accuracy(&full, &heldout, &cfg).unwrap();
        assert!((0.40..=0.60).contains(&acc), "{acc}");

        // A subspace orthogonal to the label axis removes nothing useful.
        let s = NumberSubspace::new(vec![
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert!(residual_probe_accuracy(&s, &heldout, &cfg).unwrap() >= 0.95);
    }

    #[test]
    fn precondition_errors() {
        let data = clusters(50, 4, 1);
        let cfg = ProbeConfig::default();
        assert!(find_number_subspace(&data, 0, &cfg, &data).is_err());
        let idx: Vec<usize> = (0..100).filter(|i| i % 2 == 0 || *i < 40).collect();
        let skewed = data.subset(&idx);
        assert!(matches!(
            find_number_subspace(&skewed, 1, &cfg, &data),
            Err(Error::Unbalanced { .. })
        ));
    }

    #[test]
    fn degeneration_returns_shorter_basis() {
        // Two-dimensional data: after two directions nothing is left.
        let data = axis_data(50, 2, 8);
        let (s, report) = find_number_subspace(&data, 2, &ProbeConfig::default(), &data).unwrap();
        assert!(s.k() <= 2);
        let three = find_number_subspace(&data, 3, &ProbeConfig::default(), &data);
        assert!(three.is_err());
        let one_dim = LabeledVectorSet::new(
            data.vectors().iter().map(|v| vec![v[0], 0.0]).collect(),
            data.labels().to_vec(),
            PROV,
        )
        .unwrap();
        let (s, report2) = find_number_subspace(&one_dim, 2, &ProbeConfig::default(), &one_dim).unwrap();
        assert_eq!(s.k(), 1);
        assert!(report2.degenerated.is_some());
        assert!(!report2.is_complete());
        let _ = report;
    }
}

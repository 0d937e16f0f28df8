//! Binary linear probes for grammatical number.
//!
//! Probes are L2-regularized logistic regressions trained by full-batch
//! gradient descent on standardized features. The learned weights are mapped
//! back to raw activation space, so [`probe_direction`] is a direction in the
//! same space the intervention acts on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::{dot, intervene_in_place, norm, NumberSubspace};
use crate::types::{Number, PositionRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer: usize,
    pub role: PositionRole,
}

/// Hidden vectors labelled with the number of the sentence's subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVectorSet {
    vectors: Vec<Vec<f64>>,
    labels: Vec<Number>,
    provenance: Provenance,
}

impl LabeledVectorSet {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<Number>, provenance: Provenance) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vectors but {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let d = first.len();
            for v in &vectors {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("hidden vector"));
                }
            }
        }
        Ok(Self {
            vectors,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn labels(&self) -> &[Number] {
        &self.labels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn count(&self, label: Number) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance,
        }
    }

    /// Applies the `alpha = 1` intervention along the first `k_used` basis
    /// vectors of `s` to every vector.
    pub fn ablated(&self, s: &NumberSubspace, k_used: usize) -> Result<Self> {
        if self.dim() != s.dim() && !self.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: s.dim(),
                found: self.dim(),
            });
        }
        if k_used == 0 || k_used > s.k() {
            return Err(Error::InvalidArgument(format!("k_used {k_used} outside 1..={}", s.k())));
        }
        let mut out = self.clone();
        for v in &mut out.vectors {
            intervene_in_place(v, s, 1.0, k_used);
        }
        Ok(out)
    }

    /// Removes the component along one unit direction from every vector.
    pub(crate) fn project_out(&mut self, b: &[f64]) {
        for v in &mut self.vectors {
            let c = dot(v, b);
            for (x, bi) in v.iter_mut().zip(b) {
                *x -= c * bi;
            }
        }
    }

    /// Splits into two halves, alternating within each label so both halves
    /// keep the label balance.
    pub fn split_stratified(&self) -> (Self, Self) {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for label in [Number::Singular, Number::Plural] {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
            for (n, i) in idx.into_iter().enumerate() {
                if n % 2 == 0 {
                    first.push(i);
                } else {
                    second.push(i);
                }
            }
        }
        first.sort_unstable();
        second.sort_unstable();
        (self.subset(&first), self.subset(&second))
    }

    /// Copy with labels permuted uniformly at random.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { labels, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            l2_penalty: 1e-4,
            seed: 0,
        }
    }
}

/// `score(h) = weight . h + bias`; positive scores predict singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn score(&self, h: &[f64]) -> f64 {
        dot(&self.weight, h) + self.bias
    }

    /// Ties (score exactly 0) predict plural.
    pub fn predict(&self, h: &[f64]) -> Number {
        if self.score(h) > 0.0 {
            Number::Singular
        } else {
            Number::Plural
        }
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus `l2/2 * |w|^2` (the bias is not penalized).
/// Targets are `+1` for singular and `-1` for plural.
pub fn logistic_loss(weight: &[f64], bias: f64, xs: &[Vec<f64>], ys: &[f64], l2: f64) -> f64 {
    let n = xs.len() as f64;
    let data: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| log1p_exp(-y * (dot(weight, x) + bias)))
        .sum::<f64>()
        / n;
    data + 0.5 * l2 * dot(weight, weight)
}

/// Analytic gradient of [`logistic_loss`] with respect to `(weight, bias)`.
pub fn logistic_loss_gradient(weight: &[f64], bias: f64, xs: &[Vec<f64>], ys: &[f64], l2: f64) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw = vec![0.0; weight.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(weight, x) + bias;
        // d/dz log(1 + exp(-y z)) = -y * sigmoid(-y z)
        let r = -y * sigmoid(-y * z) / n;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    for (g, w) in gw.iter_mut().zip(weight) {
        *g += l2 * w;
    }
    (gw, gb)
}

/// Per-dimension centering and one shared scale, so the fitted direction
/// keeps the geometry of the raw space.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let total: f64 = var.iter().sum::<f64>() / n;
        let shared = (total / d as f64).sqrt();
        let inv = if shared > 1e-12 { 1.0 / shared } else { 0.0 };
        // Constant features get scale 0 and are dropped from the probe.
        let scale = var
            .into_iter()
            .map(|s| {
                if (s / n).sqrt() > 1e-12 * shared.max(1.0) {
                    inv
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

/// Trains a probe by full-batch gradient descent. Fails if the loss becomes
/// NaN or increases between epochs.
pub fn train_probe(data: &LabeledVectorSet, config: &ProbeConfig) -> Result<LinearProbe> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if data.count(Number::Singular) == 0 || data.count(Number::Plural) == 0 {
        return Err(Error::SingleClass);
    }
    let d = data.dim();
    let standardizer = Standardizer::fit(data.vectors());
    let xs: Vec<Vec<f64>> = data.vectors().iter().map(|x| standardizer.apply(x)).collect();
    let ys: Vec<f64> = data.labels().iter().map(|l| l.sign()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut w: Vec<f64> = (0..d).map(|_| init.sample(&mut rng)).collect();
    for (wi, s) in w.iter_mut().zip(&standardizer.scale) {
        if *s == 0.0 {
            *wi = 0.0;
        }
    }
    let mut b = 0.0;

    let mut previous = logistic_loss(&w, b, &xs, &ys, config.l2_penalty);
    for epoch in 1..=config.epochs {
        let (gw, gb) = logistic_loss_gradient(&w, b, &xs, &ys, config.l2_penalty);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= config.learning_rate * g;
        }
        b -= config.learning_rate * gb;
        let loss = logistic_loss(&w, b, &xs, &ys, config.l2_penalty);
        if loss.is_nan() {
            return Err(Error::NanLoss { epoch });
        }
        if loss > previous + 1e-12 * previous.abs().max(1.0) {
            return Err(Error::NonMonotoneLoss {
                epoch,
                previous,
                current: loss,
            });
        }
        previous = loss;
    }

    // score = sum_j w_j (x_j - m_j) s_j + b
    let weight: Vec<f64> = w.iter().zip(&standardizer.scale).map(|(wi, s)| wi * s).collect();
    let bias = b - dot(&weight, &standardizer.mean);
    if weight.iter().any(|x| !x.is_finite()) || !bias.is_finite() {
        return Err(Error::NonFinite("probe parameters"));
    }
    Ok(LinearProbe { weight, bias })
}

/// Fraction of examples whose predicted number matches the label.
pub fn probe_accuracy(probe: &LinearProbe, data: &LabeledVectorSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if data.dim() != probe.weight.len() {
        return Err(Error::DimensionMismatch {
            expected: probe.weight.len(),
            found: data.dim(),
        });
    }
    let correct = data
        .vectors()
        .iter()
        .zip(data.labels())
        .filter(|(h, l)| probe.predict(h) == **l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// The probe's weight vector normalized to unit length.
pub fn probe_direction(probe: &LinearProbe) -> Result<Vec<f64>> {
    let n = norm(&probe.weight);
    if n.is_nan() || n <= 1e-8 {
        return Err(Error::ZeroWeight);
    }
    Ok(probe.weight.iter().map(|w| w / n).collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) const PROV: Provenance = Provenance {
        layer: 0,
        role: PositionRole::Subject,
    };

    /// Clusters at `[+-5, 0, ...]` with unit isotropic noise.
    pub(crate) fn clusters(n_per: usize, d: usize, seed: u64) -> LabeledVectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
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

    fn count_correct(p: &LinearProbe, data: &LabeledVectorSet) -> usize {
        let mut c = 0;
        for i in 0..data.len() {
            let mut s = p.bias;
            for j in 0..p.weight.len() {
                s += p.weight[j] * data.vectors()[i][j];
            }
            let want_positive = data.labels()[i] == Number::Singular;
            if (s > 0.0) == want_positive {
                c += 1;
            }
        }
        c
    }

    #[test]
    fn separable_clusters_are_perfectly_probed() {
        let train = clusters(100, 8, 1);
        let test = clusters(100, 8, 2);
        let p = train_probe(&train, &ProbeConfig::default()).unwrap();
        assert_eq!(probe_accuracy(&p, &test).unwrap(), 1.0);
        assert_eq!(probe_accuracy(&p, &train).unwrap(), 1.0);
        assert_eq!(count_correct(&p, &train), train.len());
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let data = clusters(200, 8, 3).with_shuffled_labels(17);
        let (train, test) = data.split_stratified();
        let p = train_probe(&train, &ProbeConfig::default()).unwrap();
        let acc = probe_accuracy(&p, &test).unwrap();
        assert!((0.40..=0.60).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = clusters(20, 5, 4);
        let ys: Vec<f64> = data.labels().iter().map(|l| l.sign()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b = 0.3;
        let l2 = 1e-2;
        let (gw, gb) = logistic_loss_gradient(&w, b, data.vectors(), &ys, l2);
        let eps = 1e-5;
        for j in 0..5 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += eps;
            wm[j] -= eps;
            let fd = (logistic_loss(&wp, b, data.vectors(), &ys, l2) - logistic_loss(&wm, b, data.vectors(), &ys, l2))
                / (2.0 * eps);
            assert!((fd - gw[j]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", gw[j]);
        }
        let fd = (logistic_loss(&w, b + eps, data.vectors(), &ys, l2)
            - logistic_loss(&w, b - eps, data.vectors(), &ys, l2))
            / (2.0 * eps);
        assert!((fd - gb).abs() <= 1e-4 * fd.abs().max(1e-8));
    }

    #[test]
    fn accuracy_examples() {
        let p = LinearProbe {
            weight: vec![1.0, 0.0],
            bias: 0.0,
        };
        let data = LabeledVectorSet::new(
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            vec![Number::Singular, Number::Plural],
            PROV,
        )
        .unwrap();
        assert_eq!(probe_accuracy(&p, &data).unwrap(), 1.0);
        let swapped =
            LabeledVectorSet::new(data.vectors().to_vec(), vec![Number::Plural, Number::Singular], PROV).unwrap();
        assert_eq!(probe_accuracy(&p, &swapped).unwrap(), 0.0);
        // exact ties count as plural
        let tie = LabeledVectorSet::new(vec![vec![0.0, 3.0]], vec![Number::Plural], PROV).unwrap();
        assert_eq!(probe_accuracy(&p, &tie).unwrap(), 1.0);
        let empty = LabeledVectorSet::new(vec![], vec![], PROV).unwrap();
        assert!(matches!(probe_accuracy(&p, &empty), Err(Error::EmptyData)));
    }

    #[test]
    fn direction_examples() {
        let d = probe_direction(&LinearProbe {
            weight: vec![3.0, 4.0],
            bias: 1.0,
        })
        .unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let d = probe_direction(&LinearProbe {
            weight: vec![0.0, -2.0, 0.0],
            bias: 0.0,
        })
        .unwrap();
        assert_eq!(d, vec![0.0, -1.0, 0.0]);
        assert!(matches!(
            probe_direction(&LinearProbe {
                weight: vec![0.0; 3],
                bias: 0.0
            }),
            Err(Error::ZeroWeight)
        ));
        let p = train_probe(&clusters(50, 6, 9), &ProbeConfig::default()).unwrap();
        assert!((norm(&probe_direction(&p).unwrap()) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn training_errors() {
        let one_class =
            LabeledVectorSet::new(vec![vec![1.0], vec![2.0]], vec![Number::Plural, Number::Plural], PROV).unwrap();
        assert!(matches!(
            train_probe(&one_class, &ProbeConfig::default()),
            Err(Error::SingleClass)
        ));
        let cfg = ProbeConfig {
            learning_rate: 1e3,
            ..ProbeConfig::default()
        };
        let err = train_probe(&clusters(50, 6, 2).with_shuffled_labels(1), &cfg).unwrap_err();
        assert!(
            matches!(err, Error::NonMonotoneLoss { .. } | Error::NanLoss { .. }),
            "{err}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = clusters(50, 6, 10);
        let cfg = ProbeConfig {
            seed: 42,
            ..ProbeConfig::default()
        };
        let a = probe_direction(&train_probe(&data, &cfg).unwrap()).unwrap();
        let b = probe_direction(&train_probe(&data, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablating_the_probe_direction_lowers_accuracy() {
        // Number signal spread over two axes so some survives one ablation.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let label = if i % 2 == 0 { Number::Singular } else { Number::Plural };
            let mut v: Vec<f64> = (0..6).map(|_| noise.sample(&mut rng)).collect();
            v[0] += 2.0 * label.sign();
            v[1] += 0.7 * label.sign();
            vectors.push(v);
            labels.push(label);
        }
        let data = LabeledVectorSet::new(vectors, labels, PROV).unwrap();
        let (train, test) = data.split_stratified();
        let cfg = ProbeConfig::default();
        let p = train_probe(&train, &cfg).unwrap();
        let before = probe_accuracy(&p, &test).unwrap();
        assert!(before > 0.55);
        let s = NumberSubspace::new(vec![probe_direction(&p).unwrap()]).unwrap();
        let (train_a, test_a) = (train.ablated(&s, 1).unwrap(), test.ablated(&s, 1).unwrap());
        let p2 = train_probe(&train_a, &cfg).unwrap();
        assert!(probe_accuracy(&p2, &test_a).unwrap() < before);
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_decisions(
            seed in any::<u64>(),
            c in 0.01f64..100.0,
        ) {
            let data = clusters(20, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let weight: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = LinearProbe { weight, bias: rng.random_range(-1.0..1.0) };
            let scaled = LinearProbe {
                weight: p.weight.iter().map(|w| w * c).collect(),
                bias: p.bias * c,
            };
            prop_assert_eq!(probe_accuracy(&p, &data).unwrap(), probe_accuracy(&scaled, &data).unwrap());
        }
    }
}

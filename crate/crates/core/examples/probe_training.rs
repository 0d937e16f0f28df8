//! Train a logistic probe on two synthetic clusters and read off its
//! direction, then check that shuffled labels fall to chance.

use numspace::probe::{probe_accuracy, probe_direction, train_probe, LabeledVectorSet, ProbeConfig, Provenance};
use numspace::{Number, PositionRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn clusters(n: usize, seed: u64) -> numspace::Result<LabeledVectorSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * n {
        let label = if i < n { Number::Singular } else { Number::Plural };
        let mut v: Vec<f64> = (0..8).map(|_| noise.sample(&mut rng)).collect();
        v[0] += 5.0 * label.sign();
        vectors.push(v);
        labels.push(label);
    }
    LabeledVectorSet::new(
        vectors,
        labels,
        Provenance {
            layer: 0,
            role: PositionRole::Subject,
        },
    )
}

fn main() -> numspace::Result<()> {
    let train = clusters(100, 1)?;
    let test = clusters(100, 2)?;
    let config = ProbeConfig::default();
    let probe = train_probe(&train, &config)?;
    println!("held-out accuracy {:.3}", probe_accuracy(&probe, &test)?);
    let dir = probe_direction(&probe)?;
    println!("direction {:.3?}", dir);

    let shuffled = train_probe(&train.with_shuffled_labels(7), &config)?;
    println!(
        "shuffled-label accuracy {:.3}",
        probe_accuracy(&shuffled, &test.with_shuffled_labels(8))?
    );
    Ok(())
}

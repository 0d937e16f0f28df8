//! Masked-LM training with AdamW.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{MaskedBatch, Transformer};
use crate::corpus::{AgreementSentence, Vocabulary};
use crate::error::{Error, Result};

/// How training positions are chosen for each sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskStrategy {
    /// Probability of masking only the main copula.
    pub copula_only: f64,
    /// Otherwise, the rate at which ordinary tokens are masked (at least one).
    pub token_rate: f64,
    /// With copula-only masking, probability of also masking the subject.
    pub subject_with_copula: f64,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        Self {
            copula_only: 0.5,
            token_rate: 0.15,
            subject_with_copula: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub mask: MaskStrategy,
    pub seed: u64,
    pub log_every: usize,
    /// A logged loss above this (or non-finite) aborts training.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 2e-3,
            warmup_steps: 200,
            weight_decay: 0.1,
            grad_clip: 1.0,
            mask: MaskStrategy::default(),
            seed: 0,
            log_every: 100,
            divergence_threshold: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss over each logging window.
    pub curve: Vec<LossPoint>,
    pub final_loss: f64,
    pub steps: usize,
}

/// Draws the masked positions and targets for one sentence.
pub fn mask_sentence(
    sentence: &AgreementSentence,
    vocab: &Vocabulary,
    strategy: &MaskStrategy,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<usize>) {
    let original = sentence.unmasked(vocab);
    let mut positions = Vec::new();
    if rng.random::<f64>() < strategy.copula_only {
        positions.push(sentence.main_verb_index);
        if rng.random::<f64>() < strategy.subject_with_copula {
            positions.push(sentence.subject_index);
        }
    } else {
        let candidates: Vec<usize> = (0..original.len())
            .filter(|&i| !vocab.is_special(original[i]))
            .collect();
        for &i in &candidates {
            if rng.random::<f64>() < strategy.token_rate {
                positions.push(i);
            }
        }
        if positions.is_empty() {
            positions.push(candidates[rng.random_range(0..candidates.len())]);
        }
    }
    let mut tokens = original;
    let mut targets = Vec::with_capacity(positions.len());
    positions.sort_unstable();
    for &i in &positions {
        targets.push(i);
        tokens[i] = vocab.mask_id();
    }
    (tokens, targets)
}

fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let warm = cfg.warmup_steps.max(1);
    if step < warm {
        return cfg.learning_rate * (step + 1) as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (cfg.steps.saturating_sub(warm)).max(1) as f64;
    cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trains `model` in place on random minibatches of `sentences`. Deterministic
/// for a fixed model seed and `cfg.seed`.
pub fn train_mlm(
    model: &mut Transformer<f32>,
    sentences: &[AgreementSentence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_mlm_with_progress(model, sentences, vocab, cfg, |_| {})
}

pub fn train_mlm_with_progress(
    model: &mut Transformer<f32>,
    sentences: &[AgreementSentence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut progress: impl FnMut(LossPoint),
) -> Result<TrainReport> {
    if sentences.is_empty() {
        return Err(Error::EmptyData);
    }
    if cfg.batch_size == 0 || cfg.steps == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidArgument(
            "steps, batch_size and log_every must be positive".into(),
        ));
    }
    let seq_len = sentences[0].tokens.len();
    if sentences.iter().any(|s| s.tokens.len() != seq_len) {
        return Err(Error::InvalidArgument(
            "training sentences must share one length".into(),
        ));
    }
    let batch_size = cfg.batch_size.min(sentences.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD509_0075);
    let n = model.num_parameters();
    let mut m1 = vec![0f32; n];
    let mut m2 = vec![0f32; n];
    let mut decay_mask = vec![false; n];
    for s in model.layout.decayed() {
        decay_mask[s.range()].fill(true);
    }
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);

    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;
    for step in 0..cfg.steps {
        let mut tokens = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::new();
        for (b, idx) in index::sample(&mut rng, sentences.len(), batch_size)
            .into_iter()
            .enumerate()
        {
            let s = &sentences[idx];
            let (masked, positions) = mask_sentence(s, vocab, &cfg.mask, &mut rng);
            let original = s.unmasked(vocab);
            for p in positions {
                targets.push((b * seq_len + p, original[p]));
            }
            tokens.extend(masked);
        }
        let batch = MaskedBatch {
            tokens,
            seq_len,
            targets,
        };
        let (loss, mut grad) = model.loss_and_gradient(&batch, Some(&mut dropout_rng))?;
        let loss = loss as f64;
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(Error::Divergence { step });
        }

        let gnorm = grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
        if gnorm > cfg.grad_clip {
            let s = (cfg.grad_clip / gnorm) as f32;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = learning_rate(cfg, step);
        let t = (step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let params = model.parameters_mut();
        for i in 0..n {
            let g = grad[i] as f64;
            let a = beta1 * m1[i] as f64 + (1.0 - beta1) * g;
            let v = beta2 * m2[i] as f64 + (1.0 - beta2) * g * g;
            m1[i] = a as f32;
            m2[i] = v as f32;
            let mut p = params[i] as f64;
            if decay_mask[i] {
                p -= lr * cfg.weight_decay * p;
            }
            p -= lr * (a / c1) / ((v / c2).sqrt() + eps);
            params[i] = p as f32;
        }

        window += loss;
        window_len += 1;
        if window_len == cfg.log_every || step + 1 == cfg.steps {
            let point = LossPoint {
                step: step + 1,
                loss: window / window_len as f64,
            };
            progress(point);
            curve.push(point);
            window = 0.0;
            window_len = 0;
        }
    }
    let final_loss = curve.last().map_or(f64::NAN, |p| p.loss);
    Ok(TrainReport {
        curve,
        final_loss,
        steps: cfg.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_all, Lexicon, NounPool};
    use crate::mlm::ModelConfig;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            learning_rate: 1.0,
            ..Default::default()
        };
        assert!((learning_rate(&cfg, 0) - 0.01).abs() < 1e-12);
        assert!((learning_rate(&cfg, 99) - 1.0).abs() < 1e-12);
        assert!((learning_rate(&cfg, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(&cfg, 1000) - 0.1).abs() < 1e-9);
        assert!(learning_rate(&cfg, 500) < learning_rate(&cfg, 200));
    }

    #[test]
    fn masking_respects_strategy() {
        let lexicon = Lexicon::default();
        let vocab = Vocabulary::new(&lexicon).unwrap();
        let s = &generate_all(&lexicon, &NounPool::all(&lexicon), 0, 2).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let copula = MaskStrategy {
            copula_only: 1.0,
            token_rate: 0.0,
            subject_with_copula: 1.0,
        };
        let (tokens, pos) = mask_sentence(s, &vocab, &copula, &mut rng);
        assert_eq!(pos, vec![s.subject_index, s.main_verb_index]);
        assert_eq!(tokens[s.subject_index], vocab.mask_id());
        let random = MaskStrategy {
            copula_only: 0.0,
            token_rate: 0.0,
            subject_with_copula: 0.0,
        };
        for _ in 0..20 {
            let (tokens, pos) = mask_sentence(s, &vocab, &random, &mut rng);
            assert_eq!(pos.len(), 1);
            assert!(pos[0] > 0 && pos[0] < tokens.len() - 1);
        }
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let lexicon = Lexicon::default();
        let vocab = Vocabulary::new(&lexicon).unwrap();
        let data = generate_all(&lexicon, &NounPool::train(&lexicon), 1, 50).unwrap();
        let config = ModelConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size: vocab.len(),
            max_len: 16,
            dropout: 0.1,
            pre_norm: true,
            seed: 7,
        };
        let cfg = TrainConfig {
            steps: 120,
            batch_size: 16,
            warmup_steps: 10,
            log_every: 20,
            ..Default::default()
        };
        let mut a = Transformer::<f32>::new(config).unwrap();
        let ra = train_mlm(&mut a, &data, &vocab, &cfg).unwrap();
        assert!(ra.final_loss < ra.curve[0].loss - 0.5, "{:?}", ra.curve);
        let mut b = Transformer::<f32>::new(config).unwrap();
        let rb = train_mlm(&mut b, &data, &vocab, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn divergence_is_reported() {
        let lexicon = Lexicon::default();
        let vocab = Vocabulary::new(&lexicon).unwrap();
        let data = generate_all(&lexicon, &NounPool::train(&lexicon), 1, 5).unwrap();
        let mut config = ModelConfig::new(vocab.len(), 0);
        config.num_layers = 2;
        let mut m = Transformer::<f32>::new(config).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            divergence_threshold: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            train_mlm(&mut m, &data, &vocab, &cfg),
            Err(Error::Divergence { step: 0 })
        ));
    }
}

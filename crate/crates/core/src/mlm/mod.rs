//! A small masked language model with hooks for rewriting hidden states.
//!
//! Hidden-state layers are numbered `0..=L`: layer 0 is the normalized
//! embedding output and layer `l` is the output of encoder block `l`.
//! An intervention at layer `l` rewrites that layer's states and lets
//! blocks `l+1..=L` recompute everything downstream.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod train;

pub use model::{MaskedBatch, ModelConfig, Transformer};
pub use ops::Real;
pub use train::{train_mlm, LossPoint, MaskStrategy, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::corpus::AgreementSentence;
use crate::error::{Error, Result};
use crate::probe::{LabeledVectorSet, Provenance};
use crate::subspace::{intervene_in_place, NumberSubspace};
use crate::types::PositionRole;

/// Sentences per forward batch when extracting hidden states.
const EXTRACT_CHUNK: usize = 256;

/// Token positions an intervention touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Global,
    Positions(Vec<usize>),
}

impl Scope {
    pub fn includes(&self, position: usize) -> bool {
        match self {
            Scope::Global => true,
            Scope::Positions(p) => p.contains(&position),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InterventionSpec<'a> {
    pub layer: usize,
    pub scope: &'a Scope,
    pub subspace: &'a NumberSubspace,
    pub alpha: f64,
    pub k: usize,
}

/// Hidden states (`hidden[layer][position]`) and per-position logits of
/// one sentence. With an intervention, the intervened layer holds the
/// rewritten states.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    pub fn log_probs(&self, position: usize) -> Vec<f64> {
        let row = &self.logits[position];
        let lse = ops::log_sum_exp(row);
        row.iter().map(|x| x - lse).collect()
    }
}

impl<T: Real> Transformer<T> {
    /// Hidden states of every layer for `B` sequences of length
    /// `seq_len`: `L + 1` buffers of `B * seq_len * d` values.
    pub fn encode_all_layers(&self, tokens: &[u32], seq_len: usize) -> Result<Vec<Vec<T>>> {
        self.check_tokens(tokens, seq_len)?;
        let mut out = Vec::with_capacity(self.config.num_layers + 1);
        out.push(self.embed(tokens, seq_len, None));
        for l in 0..self.config.num_layers {
            let next = self.block(l, out.last().expect("nonempty"), seq_len);
            out.push(next);
        }
        Ok(out)
    }

    /// Continues a forward pass from the states at `layer` to the final
    /// layer.
    pub fn run_from(&self, layer: usize, hidden: &[T], seq_len: usize) -> Result<Vec<T>> {
        let d = self.config.hidden_dim;
        if layer > self.config.num_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} exceeds model depth {}",
                self.config.num_layers
            )));
        }
        if !hidden.len().is_multiple_of(d * seq_len) {
            return Err(Error::DimensionMismatch {
                expected: d * seq_len,
                found: hidden.len(),
            });
        }
        let mut h = hidden.to_vec();
        for l in layer..self.config.num_layers {
            h = self.block(l, &h, seq_len);
        }
        Ok(h)
    }

    /// Output logits for the given rows of a final-layer buffer.
    pub fn logits_at(&self, final_hidden: &[T], rows: &[usize]) -> Vec<T> {
        self.logits(final_hidden, rows)
    }

    /// Rewrites the selected rows of a layer buffer in place.
    pub fn intervene_rows(
        &self,
        hidden: &mut [T],
        rows: &[usize],
        subspace: &NumberSubspace,
        alpha: f64,
        k: usize,
    ) -> Result<()> {
        let d = self.config.hidden_dim;
        if subspace.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: subspace.dim(),
            });
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        if k > subspace.k() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds subspace size {}",
                subspace.k()
            )));
        }
        if alpha == 0.0 || k == 0 {
            return Ok(());
        }
        let mut buf = vec![0.0; d];
        for &row in rows {
            let slot = &mut hidden[row * d..(row + 1) * d];
            for (b, x) in buf.iter_mut().zip(slot.iter()) {
                *b = x.as_f64();
            }
            intervene_in_place(&mut buf, subspace, alpha, k);
            for (x, b) in slot.iter_mut().zip(&buf) {
                *x = T::from_f64(*b);
            }
        }
        Ok(())
    }

    /// Single-sentence forward pass with every layer and all logits.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.forward_impl(tokens, None)
    }

    pub fn forward_with_intervention(&self, tokens: &[u32], spec: &InterventionSpec<'_>) -> Result<ForwardTrace> {
        self.forward_impl(tokens, Some(spec))
    }

    fn forward_impl(&self, tokens: &[u32], spec: Option<&InterventionSpec<'_>>) -> Result<ForwardTrace> {
        let t = tokens.len();
        let d = self.config.hidden_dim;
        self.check_tokens(tokens, t)?;
        let mut layers = vec![self.embed(tokens, t, None)];
        for l in 0..=self.config.num_layers {
            if let Some(s) = spec.filter(|s| s.layer == l) {
                let rows: Vec<usize> = (0..t).filter(|&i| s.scope.includes(i)).collect();
                self.intervene_rows(layers.last_mut().expect("nonempty"), &rows, s.subspace, s.alpha, s.k)?;
            }
            if l < self.config.num_layers {
                let next = self.block(l, layers.last().expect("nonempty"), t);
                layers.push(next);
            }
        }
        if let Some(s) = spec {
            if s.layer > self.config.num_layers {
                return Err(Error::InvalidArgument(format!("layer {} exceeds model depth", s.layer)));
            }
        }
        let all_rows: Vec<usize> = (0..t).collect();
        let logits = self.logits(layers.last().expect("nonempty"), &all_rows);
        let to_rows = |buf: &[T], width: usize| -> Vec<Vec<f64>> {
            buf.chunks_exact(width)
                .map(|r| r.iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        Ok(ForwardTrace {
            hidden: layers.iter().map(|h| to_rows(h, d)).collect(),
            logits: to_rows(&logits, self.config.vocab_size),
        })
    }
}

/// Hidden vectors at `role` for each requested layer, one labeled vector per
/// sentence (label = subject number). Sentences must share one length.
pub fn extract_hidden_layers<T: Real>(
    model: &Transformer<T>,
    sentences: &[AgreementSentence],
    layers: &[usize],
    role: PositionRole,
) -> Result<Vec<LabeledVectorSet>> {
    if sentences.is_empty() {
        return Err(Error::EmptyData);
    }
    let depth = model.config().num_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l > depth) {
        return Err(Error::InvalidArgument(format!(
            "layer {bad} exceeds model depth {depth}"
        )));
    }
    let seq_len = sentences[0].tokens.len();
    if sentences.iter().any(|s| s.tokens.len() != seq_len) {
        return Err(Error::InvalidArgument("sentences must share one length".into()));
    }
    let positions = sentences.iter().map(|s| s.position(role)).collect::<Result<Vec<_>>>()?;
    let d = model.config().hidden_dim;
    let mut vectors: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(sentences.len()); layers.len()];
    for (chunk, pos) in sentences.chunks(EXTRACT_CHUNK).zip(positions.chunks(EXTRACT_CHUNK)) {
        let tokens: Vec<u32> = chunk.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        let states = model.encode_all_layers(&tokens, seq_len)?;
        for (out, &layer) in vectors.iter_mut().zip(layers) {
            for (b, &p) in pos.iter().enumerate() {
                let row = b * seq_len + p;
                out.push(
                    states[layer][row * d..(row + 1) * d]
                        .iter()
                        .map(|x| x.as_f64())
                        .collect(),
                );
            }
        }
    }
    let labels: Vec<_> = sentences.iter().map(|s| s.subject_number).collect();
    vectors
        .into_iter()
        .zip(layers)
        .map(|(v, &layer)| LabeledVectorSet::new(v, labels.clone(), Provenance { layer, role }))
        .collect()
}

pub fn extract_hidden<T: Real>(
    model: &Transformer<T>,
    sentences: &[AgreementSentence],
    layer: usize,
    role: PositionRole,
) -> Result<LabeledVectorSet> {
    Ok(extract_hidden_layers(model, sentences, &[layer], role)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::{intervene, random_subspace};

    fn model() -> Transformer<f64> {
        let config = ModelConfig {
            num_layers: 3,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 20,
            max_len: 8,
            dropout: 0.0,
            pre_norm: true,
            seed: 11,
        };
        Transformer::new(config).unwrap()
    }

    #[test]
    fn alpha_zero_is_exact_no_op() {
        let m = model();
        let tokens = [1, 5, 9, 3, 2];
        let s = random_subspace(16, 4, 0).unwrap();
        let base = m.forward(&tokens).unwrap();
        for layer in 0..=3 {
            let spec = InterventionSpec {
                layer,
                scope: &Scope::Global,
                subspace: &s,
                alpha: 0.0,
                k: 4,
            };
            let t = m.forward_with_intervention(&tokens, &spec).unwrap();
            assert_eq!(t.logits, base.logits);
            assert_eq!(t.hidden, base.hidden);
        }
    }

    #[test]
    fn intervention_changes_only_downstream() {
        let m = model();
        let tokens = [1, 5, 9, 3, 2];
        let s = random_subspace(16, 4, 1).unwrap();
        let base = m.forward(&tokens).unwrap();
        let scope = Scope::Positions(vec![2]);
        let spec = InterventionSpec {
            layer: 1,
            scope: &scope,
            subspace: &s,
            alpha: 2.0,
            k: 4,
        };
        let t = m.forward_with_intervention(&tokens, &spec).unwrap();
        assert_eq!(t.hidden[0], base.hidden[0]);
        for i in [0, 1, 3, 4] {
            assert_eq!(t.hidden[1][i], base.hidden[1][i]);
        }
        let expected = intervene(&base.hidden[1][2], &s, 2.0, 4).unwrap();
        for (a, b) in t.hidden[1][2].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(t.hidden[2], base.hidden[2]);
        assert_ne!(t.logits, base.logits);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = model();
        let a = [1u32, 5, 9, 3, 2];
        let b = [1u32, 6, 7, 4, 2];
        let tokens: Vec<u32> = a.iter().chain(&b).copied().collect();
        let layers = m.encode_all_layers(&tokens, 5).unwrap();
        let single = m.forward(&b).unwrap();
        for (l, states) in layers.iter().enumerate() {
            for i in 0..5 {
                let row = &states[(5 + i) * 16..(6 + i) * 16];
                for (x, y) in row.iter().zip(&single.hidden[l][i]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let tail = m.run_from(1, &layers[1], 5).unwrap();
        assert_eq!(tail, layers[3]);
    }

    #[test]
    fn rejects_bad_specs() {
        let m = model();
        let s = random_subspace(16, 2, 0).unwrap();
        let spec = InterventionSpec {
            layer: 1,
            scope: &Scope::Global,
            subspace: &s,
            alpha: 1.0,
            k: 3,
        };
        assert!(m.forward_with_intervention(&[1, 2], &spec).is_err());
        let spec = InterventionSpec {
            layer: 9,
            scope: &Scope::Global,
            subspace: &s,
            alpha: 1.0,
            k: 2,
        };
        assert!(m.forward_with_intervention(&[1, 2], &spec).is_err());
        let wrong = random_subspace(8, 2, 0).unwrap();
        let spec = InterventionSpec {
            layer: 1,
            scope: &Scope::Global,
            subspace: &wrong,
            alpha: 1.0,
            k: 2,
        };
        assert!(m.forward_with_intervention(&[1, 2], &spec).is_err());
    }
}

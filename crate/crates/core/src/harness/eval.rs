//! Conjugation accuracy and side-effect perplexity under interventions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{AgreementSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::mlm::ops::log_sum_exp;
use crate::mlm::{InterventionSpec, Transformer};
use crate::subspace::NumberSubspace;
use crate::types::{Number, PositionRole};

/// Which positions of each sentence an intervention rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Global,
    /// The main subject only ("local" intervention).
    Subject,
    /// Subject and embedded verb.
    SubjectVerb,
    MainVerb,
    NumberNeutral,
}

impl ScopeKind {
    pub const ALL: [ScopeKind; 5] = [
        ScopeKind::Global,
        ScopeKind::Subject,
        ScopeKind::SubjectVerb,
        ScopeKind::MainVerb,
        ScopeKind::NumberNeutral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScopeKind::Global => "global",
            ScopeKind::Subject => "subject",
            ScopeKind::SubjectVerb => "subject_verb",
            ScopeKind::MainVerb => "main_verb",
            ScopeKind::NumberNeutral => "number_neutral",
        }
    }

    /// Positions of `sentence` in scope. Delimiters count toward the global
    /// scope only when `include_delimiters` is set.
    pub fn positions(
        self,
        sentence: &AgreementSentence,
        vocab: &Vocabulary,
        include_delimiters: bool,
    ) -> Result<Vec<usize>> {
        Ok(match self {
            ScopeKind::Global => {
                let delimiters = if include_delimiters {
                    Vec::new()
                } else {
                    sentence.delimiter_positions(vocab)
                };
                (0..sentence.tokens.len()).filter(|i| !delimiters.contains(i)).collect()
            }
            ScopeKind::Subject => vec![sentence.subject_index],
            ScopeKind::SubjectVerb => {
                vec![sentence.subject_index, sentence.position(PositionRole::EmbeddedVerb)?]
            }
            ScopeKind::MainVerb => vec![sentence.main_verb_index],
            ScopeKind::NumberNeutral => sentence.number_neutral_positions(vocab)?,
        })
    }
}

impl fmt::Display for ScopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScopeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ScopeKind::Global),
            "subject" | "local" => Ok(ScopeKind::Subject),
            "subject_verb" | "subject-verb" | "subj+verb" => Ok(ScopeKind::SubjectVerb),
            "main_verb" | "main-verb" => Ok(ScopeKind::MainVerb),
            "number_neutral" | "number-neutral" | "neutral" => Ok(ScopeKind::NumberNeutral),
            other => Err(Error::InvalidArgument(format!("unknown scope {other:?}"))),
        }
    }
}

/// Sentence subsets that results are broken down by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    All,
    Redundant,
    NonRedundant,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::All, Condition::Redundant, Condition::NonRedundant];

    pub fn admits(self, sentence: &AgreementSentence) -> bool {
        match self {
            Condition::All => true,
            Condition::Redundant => sentence.has_redundant_cue,
            Condition::NonRedundant => !sentence.has_redundant_cue,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::All => "all",
            Condition::Redundant => "redundant",
            Condition::NonRedundant => "non_redundant",
        }
    }
}

/// One intervention applied uniformly to an evaluation set.
#[derive(Debug, Clone, Copy)]
pub struct Intervention<'a> {
    pub layer: usize,
    pub scope: ScopeKind,
    pub include_delimiters: bool,
    pub subspace: &'a NumberSubspace,
    pub alpha: f64,
    pub k: usize,
}

fn check_set(sentences: &[AgreementSentence], vocab: &Vocabulary) -> Result<usize> {
    let first = sentences.first().ok_or(Error::EmptyData)?;
    let seq_len = first.tokens.len();
    for s in sentences {
        if s.tokens.len() != seq_len {
            return Err(Error::InvalidArgument(
                "evaluation sentences must share one length".into(),
            ));
        }
        if s.tokens[s.main_verb_index] != vocab.mask_id() {
            return Err(Error::InvalidArgument("main verb is not masked".into()));
        }
    }
    Ok(seq_len)
}

/// Rows of a batch buffer selected by a scope.
fn scope_rows(
    sentences: &[AgreementSentence],
    vocab: &Vocabulary,
    seq_len: usize,
    scope: ScopeKind,
    include_delimiters: bool,
) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    for (b, s) in sentences.iter().enumerate() {
        rows.extend(
            scope
                .positions(s, vocab, include_delimiters)?
                .into_iter()
                .map(|p| b * seq_len + p),
        );
    }
    Ok(rows)
}

/// Conjugation evaluation over a fixed test set with cached base states, so
/// each intervention only recomputes the layers above it.
pub struct Evaluator<'a> {
    model: &'a Transformer<f32>,
    vocab: &'a Vocabulary,
    sentences: &'a [AgreementSentence],
    seq_len: usize,
    base: Vec<Vec<f32>>,
    baseline: Vec<bool>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a Transformer<f32>, vocab: &'a Vocabulary, sentences: &'a [AgreementSentence]) -> Result<Self> {
        let seq_len = check_set(sentences, vocab)?;
        let tokens: Vec<u32> = sentences.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        let base = model.encode_all_layers(&tokens, seq_len)?;
        let mut ev = Self {
            model,
            vocab,
            sentences,
            seq_len,
            base,
            baseline: Vec::new(),
        };
        let last = ev.base.len() - 1;
        ev.baseline = ev.judge(&ev.base[last]);
        Ok(ev)
    }

    pub fn sentences(&self) -> &[AgreementSentence] {
        self.sentences
    }

    pub fn num_layers(&self) -> usize {
        self.base.len() - 1
    }

    fn judge(&self, final_hidden: &[f32]) -> Vec<bool> {
        let rows: Vec<usize> = self
            .sentences
            .iter()
            .enumerate()
            .map(|(b, s)| b * self.seq_len + s.main_verb_index)
            .collect();
        let logits = self.model.logits_at(final_hidden, &rows);
        let v = self.model.config().vocab_size;
        let is = self.vocab.copula(Number::Singular) as usize;
        let are = self.vocab.copula(Number::Plural) as usize;
        logits
            .chunks_exact(v)
            .zip(self.sentences)
            .map(|(row, s)| {
                let predicted = if row[is] > row[are] {
                    Number::Singular
                } else {
                    Number::Plural
                };
                predicted == s.subject_number
            })
            .collect()
    }

    /// Per-sentence correctness without intervention.
    pub fn baseline(&self) -> &[bool] {
        &self.baseline
    }

    /// Per-sentence correctness with the intervention applied.
    pub fn correct(&self, iv: &Intervention<'_>) -> Result<Vec<bool>> {
        if iv.layer > self.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "layer {} exceeds model depth",
                iv.layer
            )));
        }
        if iv.alpha == 0.0 {
            // Validate the rest of the spec even though nothing changes.
            let mut probe = self.base[iv.layer][..self.model.config().hidden_dim].to_vec();
            self.model
                .intervene_rows(&mut probe, &[], iv.subspace, iv.alpha, iv.k)?;
            return Ok(self.baseline.clone());
        }
        let rows = scope_rows(
            self.sentences,
            self.vocab,
            self.seq_len,
            iv.scope,
            iv.include_delimiters,
        )?;
        let mut h = self.base[iv.layer].clone();
        self.model.intervene_rows(&mut h, &rows, iv.subspace, iv.alpha, iv.k)?;
        let out = self.model.run_from(iv.layer, &h, self.seq_len)?;
        Ok(self.judge(&out))
    }

    /// Accuracy of `correct` restricted to `condition`; `None` when no
    /// sentence falls in the condition.
    pub fn accuracy_in(&self, correct: &[bool], condition: Condition) -> Option<f64> {
        let (hits, n) = correct
            .iter()
            .zip(self.sentences)
            .filter(|(_, s)| condition.admits(s))
            .fold((0usize, 0usize), |(h, n), (&c, _)| (h + c as usize, n + 1));
        (n > 0).then(|| hits as f64 / n as f64)
    }
}

/// Fraction of sentences whose preferred copula ("is" vs "are") matches the
/// subject number, optionally under an intervention.
pub fn conjugation_accuracy(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    sentences: &[AgreementSentence],
    spec: Option<&InterventionSpec<'_>>,
) -> Result<f64> {
    check_set(sentences, vocab)?;
    let is = vocab.copula(Number::Singular) as usize;
    let are = vocab.copula(Number::Plural) as usize;
    let mut hits = 0;
    for s in sentences {
        let trace = match spec {
            Some(spec) => model.forward_with_intervention(&s.tokens, spec)?,
            None => model.forward(&s.tokens)?,
        };
        let row = &trace.logits[s.main_verb_index];
        let predicted = if row[is] > row[are] {
            Number::Singular
        } else {
            Number::Plural
        };
        hits += (predicted == s.subject_number) as usize;
    }
    Ok(hits as f64 / sentences.len() as f64)
}

/// Masked-token perplexity on number-neutral words, one masked word per
/// sequence, with interventions on the number-neutral positions.
pub struct SideEffectEvaluator<'a> {
    model: &'a Transformer<f32>,
    seq_len: usize,
    targets: Vec<(usize, u32)>,
    scope: Vec<usize>,
    base: Vec<Vec<f32>>,
    base_nll: f64,
}

impl<'a> SideEffectEvaluator<'a> {
    pub fn new(model: &'a Transformer<f32>, vocab: &Vocabulary, sentences: &[AgreementSentence]) -> Result<Self> {
        let seq_len = check_set(sentences, vocab)?;
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        let mut scope = Vec::new();
        let mut b = 0;
        for s in sentences {
            let original = s.unmasked(vocab);
            let neutral = s.number_neutral_positions(vocab)?;
            for &p in &neutral {
                let mut seq = original.clone();
                seq[p] = vocab.mask_id();
                tokens.extend(seq);
                targets.push((b * seq_len + p, original[p]));
                scope.extend(neutral.iter().map(|&q| b * seq_len + q));
                b += 1;
            }
        }
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no number-neutral tokens in scope".into()));
        }
        let base = model.encode_all_layers(&tokens, seq_len)?;
        let mut ev = Self {
            model,
            seq_len,
            targets,
            scope,
            base,
            base_nll: 0.0,
        };
        let last = ev.base.len() - 1;
        ev.base_nll = ev.mean_nll(&ev.base[last]);
        Ok(ev)
    }

    fn mean_nll(&self, final_hidden: &[f32]) -> f64 {
        let rows: Vec<usize> = self.targets.iter().map(|t| t.0).collect();
        let logits = self.model.logits_at(final_hidden, &rows);
        let v = self.model.config().vocab_size;
        let total: f64 = logits
            .chunks_exact(v)
            .zip(&self.targets)
            .map(|(row, &(_, t))| {
                let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                log_sum_exp(&row) - row[t as usize]
            })
            .sum();
        total / self.targets.len() as f64
    }

    pub fn num_tokens(&self) -> usize {
        self.targets.len()
    }

    pub fn base_perplexity(&self) -> f64 {
        self.base_nll.exp()
    }

    /// Perplexity after rewriting the number-neutral positions at `layer`.
    pub fn perplexity(&self, layer: usize, subspace: &NumberSubspace, alpha: f64, k: usize) -> Result<f64> {
        if layer >= self.base.len() {
            return Err(Error::InvalidArgument(format!("layer {layer} exceeds model depth")));
        }
        let mut h = self.base[layer].clone();
        self.model.intervene_rows(&mut h, &self.scope, subspace, alpha, k)?;
        if alpha == 0.0 || k == 0 {
            return Ok(self.base_perplexity());
        }
        let out = self.model.run_from(layer, &h, self.seq_len)?;
        Ok(self.mean_nll(&out).exp())
    }

    pub fn factor(&self, layer: usize, subspace: &NumberSubspace, alpha: f64, k: usize) -> Result<f64> {
        Ok(self.perplexity(layer, subspace, alpha, k)? / self.base_perplexity())
    }
}

/// Perplexity factors `(number, random)` for interventions on number-neutral
/// words at `layer`; `random` should have the same size as `number`.
#[allow(clippy::too_many_arguments)]
pub fn perplexity_factor(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    sentences: &[AgreementSentence],
    layer: usize,
    number: &NumberSubspace,
    random: &NumberSubspace,
    alpha: f64,
    k: usize,
) -> Result<(f64, f64)> {
    let ev = SideEffectEvaluator::new(model, vocab, sentences)?;
    Ok((ev.factor(layer, number, alpha, k)?, ev.factor(layer, random, alpha, k)?))
}

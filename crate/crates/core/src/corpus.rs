//! Templated agreement sentences over a closed lexicon.
//!
//! Two templates, each with a relative clause between the subject and the
//! masked main copula:
//!
//! ```text
//! SubjectRelative: [CLS] the N1 that V the N2 [MASK] ADJ . [SEP]
//! ObjectRelative:  [CLS] the N1 that the N2 V [MASK] ADJ . [SEP]
//! ```
//!
//! The embedded verb agrees with its own subject: N1 in subject relatives
//! (a redundant cue to the main subject's number) and N2 in object
//! relatives (no redundant cue).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Number, PositionRole};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 4] = [PAD, CLS, SEP, MASK];

pub const SUBJECT_INDEX: usize = 2;
pub const MAIN_VERB_INDEX: usize = 7;
pub const SENTENCE_LEN: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub noun_pairs: Vec<(String, String)>,
    pub transitive_verb_pairs: Vec<(String, String)>,
    pub adjectives: Vec<String>,
    pub copulas: (String, String),
    pub determiner: String,
    pub complementizer: String,
    pub period: String,
    /// Fraction of noun pairs (taken from the end of the list) that never
    /// occur as main subjects in training sentences.
    pub reserved_noun_fraction: f64,
}

fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
    list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            noun_pairs: pairs(&[
                ("author", "authors"),
                ("teacher", "teachers"),
                ("pilot", "pilots"),
                ("surgeon", "surgeons"),
                ("farmer", "farmers"),
                ("senator", "senators"),
                ("manager", "managers"),
                ("customer", "customers"),
                ("officer", "officers"),
                ("doctor", "doctors"),
                ("lawyer", "lawyers"),
                ("dancer", "dancers"),
                ("singer", "singers"),
                ("student", "students"),
                ("painter", "painters"),
                ("driver", "drivers"),
                ("banker", "bankers"),
                ("baker", "bakers"),
                ("guard", "guards"),
                ("judge", "judges"),
                ("nurse", "nurses"),
                ("artist", "artists"),
                ("actor", "actors"),
                ("writer", "writers"),
                ("poet", "poets"),
                ("athlete", "athletes"),
                ("chef", "chefs"),
                ("clerk", "clerks"),
                ("mayor", "mayors"),
                ("minister", "ministers"),
                ("professor", "professors"),
                ("soldier", "soldiers"),
                ("tourist", "tourists"),
                ("waiter", "waiters"),
                ("worker", "workers"),
                ("child", "children"),
                ("man", "men"),
                ("woman", "women"),
                ("person", "people"),
                ("architect", "architects"),
            ]),
            transitive_verb_pairs: pairs(&[
                ("admires", "admire"),
                ("likes", "like"),
                ("hates", "hate"),
                ("loves", "love"),
                ("knows", "know"),
                ("meets", "meet"),
                ("sees", "see"),
                ("helps", "help"),
                ("trusts", "trust"),
                ("fears", "fear"),
                ("thanks", "thank"),
                ("calls", "call"),
                ("blames", "blame"),
                ("praises", "praise"),
                ("visits", "visit"),
                ("follows", "follow"),
                ("watches", "watch"),
                ("hires", "hire"),
                ("greets", "greet"),
                ("avoids", "avoid"),
            ]),
            adjectives: [
                "happy", "tall", "old", "young", "smart", "brave", "tired", "angry", "famous", "rich", "kind", "quiet",
                "busy", "calm", "strong",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            copulas: ("is".into(), "are".into()),
            determiner: "the".into(),
            complementizer: "that".into(),
            period: ".".into(),
            reserved_noun_fraction: 0.2,
        }
    }
}

impl Lexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let lex: Lexicon = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Every surface form, each exactly once.
    pub fn surface_forms(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![
            &self.determiner,
            &self.complementizer,
            &self.period,
            &self.copulas.0,
            &self.copulas.1,
        ];
        for (s, p) in self.noun_pairs.iter().chain(&self.transitive_verb_pairs) {
            out.push(s);
            out.push(p);
        }
        out.extend(self.adjectives.iter().map(String::as_str));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.noun_pairs.len() < 2 || self.transitive_verb_pairs.is_empty() || self.adjectives.is_empty() {
            return Err(Error::InvalidArgument(
                "lexicon needs at least two noun pairs, one verb pair and one adjective".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for form in self.surface_forms() {
            if form.is_empty() || form.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("form {form:?} is not a single token")));
            }
            if SPECIAL_TOKENS.contains(&form) || !seen.insert(form) {
                return Err(Error::InvalidArgument(format!("form {form:?} appears twice")));
            }
        }
        if !(0.0..1.0).contains(&self.reserved_noun_fraction) {
            return Err(Error::InvalidArgument(
                "reserved_noun_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Number of noun pairs reserved as test-only subjects.
    pub fn reserved_nouns(&self) -> usize {
        let n = (self.noun_pairs.len() as f64 * self.reserved_noun_fraction).round() as usize;
        n.min(self.noun_pairs.len() - 1)
    }
}

/// Lexical category of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Special,
    Determiner,
    Complementizer,
    Period,
    Copula(Number),
    Noun { pair: usize, number: Number },
    Verb { pair: usize, number: Number },
    Adjective(usize),
}

impl WordClass {
    /// Neither a noun nor a verb (copulas count as verbs) nor a special token.
    pub fn is_number_neutral(self) -> bool {
        matches!(
            self,
            WordClass::Determiner | WordClass::Complementizer | WordClass::Period | WordClass::Adjective(_)
        )
    }
}

/// Bijective word <-> id mapping: special tokens first, then the lexicon's
/// surface forms in [`Lexicon::surface_forms`] order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    classes: Vec<WordClass>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(lexicon: &Lexicon) -> Result<Self> {
        lexicon.validate()?;
        let mut words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut classes = vec![WordClass::Special; SPECIAL_TOKENS.len()];
        let mut push = |w: &str, c: WordClass| {
            words.push(w.to_string());
            classes.push(c);
        };
        push(&lexicon.determiner, WordClass::Determiner);
        push(&lexicon.complementizer, WordClass::Complementizer);
        push(&lexicon.period, WordClass::Period);
        push(&lexicon.copulas.0, WordClass::Copula(Number::Singular));
        push(&lexicon.copulas.1, WordClass::Copula(Number::Plural));
        for (pair, (s, p)) in lexicon.noun_pairs.iter().enumerate() {
            push(
                s,
                WordClass::Noun {
                    pair,
                    number: Number::Singular,
                },
            );
            push(
                p,
                WordClass::Noun {
                    pair,
                    number: Number::Plural,
                },
            );
        }
        for (pair, (s, p)) in lexicon.transitive_verb_pairs.iter().enumerate() {
            push(
                s,
                WordClass::Verb {
                    pair,
                    number: Number::Singular,
                },
            );
            push(
                p,
                WordClass::Verb {
                    pair,
                    number: Number::Plural,
                },
            );
        }
        for (i, a) in lexicon.adjectives.iter().enumerate() {
            push(a, WordClass::Adjective(i));
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self { words, classes, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id))
    }

    pub fn class(&self, id: u32) -> Result<WordClass> {
        self.classes.get(id as usize).copied().ok_or(Error::UnknownTokenId(id))
    }

    pub fn mask_id(&self) -> u32 {
        3
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Id of "is" (singular) or "are" (plural).
    pub fn copula(&self, number: Number) -> u32 {
        match number {
            Number::Singular => 7,
            Number::Plural => 8,
        }
    }

    fn noun(&self, pair: usize, number: Number) -> u32 {
        (9 + 2 * pair + usize::from(number == Number::Plural)) as u32
    }

    fn noun_pairs(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| matches!(c, WordClass::Noun { .. }))
            .count()
            / 2
    }

    fn verb(&self, pair: usize, number: Number) -> u32 {
        (9 + 2 * self.noun_pairs() + 2 * pair + usize::from(number == Number::Plural)) as u32
    }

    fn adjective(&self, i: usize) -> u32 {
        let verbs = self
            .classes
            .iter()
            .filter(|c| matches!(c, WordClass::Verb { .. }))
            .count();
        (9 + 2 * self.noun_pairs() + verbs + i) as u32
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.word(i).map(str::to_string)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    SubjectRelative,
    ObjectRelative,
}

impl TemplateKind {
    pub fn embedded_verb_index(self) -> usize {
        match self {
            TemplateKind::SubjectRelative => 4,
            TemplateKind::ObjectRelative => 6,
        }
    }

    pub fn embedded_noun_index(self) -> usize {
        match self {
            TemplateKind::SubjectRelative => 6,
            TemplateKind::ObjectRelative => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementSentence {
    pub kind: TemplateKind,
    /// Token ids with the main copula replaced by `[MASK]`.
    pub tokens: Vec<u32>,
    pub subject_index: usize,
    pub main_verb_index: usize,
    pub embedded_verb_index: Option<usize>,
    pub subject_number: Number,
    pub embedded_np_number: Number,
    pub has_redundant_cue: bool,
}

impl AgreementSentence {
    /// Gold copula id ("is" for singular subjects, "are" for plural).
    pub fn gold_copula(&self, vocab: &Vocabulary) -> u32 {
        vocab.copula(self.subject_number)
    }

    /// Tokens with the gold copula restored.
    pub fn unmasked(&self, vocab: &Vocabulary) -> Vec<u32> {
        let mut t = self.tokens.clone();
        t[self.main_verb_index] = self.gold_copula(vocab);
        t
    }

    pub fn position(&self, role: PositionRole) -> Result<usize> {
        match role {
            PositionRole::Subject => Ok(self.subject_index),
            PositionRole::MainVerb => Ok(self.main_verb_index),
            PositionRole::EmbeddedVerb => self.embedded_verb_index.ok_or(Error::MissingRole("embedded verb")),
        }
    }

    /// Positions of determiners, complementizers, adjectives and punctuation.
    pub fn number_neutral_positions(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, &t) in self.tokens.iter().enumerate() {
            if vocab.class(t)?.is_number_neutral() {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// Positions holding `[CLS]`/`[SEP]`/`[PAD]`.
    pub fn delimiter_positions(&self, vocab: &Vocabulary) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| i != self.main_verb_index && vocab.is_special(self.tokens[i]))
            .collect()
    }

    /// Space-separated surface form, delimiters included.
    pub fn surface(&self, vocab: &Vocabulary) -> Result<String> {
        Ok(vocab.decode(&self.tokens)?.join(" "))
    }

    /// Surface form without `[CLS]`/`[SEP]`.
    pub fn text(&self, vocab: &Vocabulary) -> Result<String> {
        let words = vocab.decode(&self.tokens)?;
        Ok(words
            .iter()
            .filter(|w| *w != CLS && *w != SEP && *w != PAD)
            .cloned()
            .collect::<Vec<_>>()
            .join(" "))
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> Result<CorpusRecord> {
        Ok(CorpusRecord {
            tokens: self.surface(vocab)?,
            subject_index: self.subject_index,
            main_verb_index: self.main_verb_index,
            embedded_verb_index: self.embedded_verb_index.map_or(-1, |i| i as i64),
            subject_number: self.subject_number,
            has_redundant_cue: self.has_redundant_cue,
        })
    }

    pub fn from_record(record: &CorpusRecord, vocab: &Vocabulary) -> Result<Self> {
        let words: Vec<&str> = record.tokens.split_whitespace().collect();
        let tokens = vocab.encode(&words)?;
        let n = tokens.len();
        if record.subject_index >= n || record.main_verb_index >= n {
            return Err(Error::Format("record index outside sentence".into()));
        }
        if tokens[record.main_verb_index] != vocab.mask_id() {
            return Err(Error::Format("main verb position is not masked".into()));
        }
        let embedded_verb_index = match record.embedded_verb_index {
            -1 => None,
            i if i >= 0 && (i as usize) < n => Some(i as usize),
            _ => return Err(Error::Format("embedded verb index outside sentence".into())),
        };
        let kind = if record.has_redundant_cue {
            TemplateKind::SubjectRelative
        } else {
            TemplateKind::ObjectRelative
        };
        let embedded_np_number = tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != record.subject_index)
            .find_map(|(_, &t)| match vocab.class(t) {
                Ok(WordClass::Noun { number, .. }) => Some(number),
                _ => None,
            })
            .ok_or_else(|| Error::Format("record has no embedded noun".into()))?;
        Ok(Self {
            kind,
            tokens,
            subject_index: record.subject_index,
            main_verb_index: record.main_verb_index,
            embedded_verb_index,
            subject_number: record.subject_number,
            embedded_np_number,
            has_redundant_cue: record.has_redundant_cue,
        })
    }
}

/// One line of the corpus export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: String,
    pub subject_index: usize,
    pub main_verb_index: usize,
    pub embedded_verb_index: i64,
    pub subject_number: Number,
    pub has_redundant_cue: bool,
}

pub fn write_jsonl<W: Write>(mut w: W, sentences: &[AgreementSentence], vocab: &Vocabulary) -> Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut w, &s.to_record(vocab)?)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Vec<AgreementSentence>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)?;
        out.push(AgreementSentence::from_record(&record, vocab)?);
    }
    Ok(out)
}

/// Which noun pairs may fill the subject and embedded-NP slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounPool {
    pub subject: Vec<usize>,
    pub embedded: Vec<usize>,
}

impl NounPool {
    pub fn all(lexicon: &Lexicon) -> Self {
        let all: Vec<usize> = (0..lexicon.noun_pairs.len()).collect();
        Self {
            subject: all.clone(),
            embedded: all,
        }
    }

    /// Training sentences: reserved nouns never appear as main subjects, but
    /// do appear inside the relative clause.
    pub fn train(lexicon: &Lexicon) -> Self {
        let n = lexicon.noun_pairs.len();
        let cut = n - lexicon.reserved_nouns();
        Self {
            subject: (0..cut).collect(),
            embedded: (0..n).collect(),
        }
    }

    /// Test sentences: reserved nouns as main subjects.
    pub fn test(lexicon: &Lexicon) -> Self {
        let n = lexicon.noun_pairs.len();
        let cut = n - lexicon.reserved_nouns();
        if cut == n {
            return Self::all(lexicon);
        }
        Self {
            subject: (cut..n).collect(),
            embedded: (0..n).collect(),
        }
    }

    fn embedded_for(&self, subject: usize) -> impl Iterator<Item = usize> + '_ {
        self.embedded.iter().copied().filter(move |&e| e != subject)
    }

    fn combinations(&self, verbs: usize, adjectives: usize) -> usize {
        self.subject
            .iter()
            .map(|&s| self.embedded_for(s).count())
            .sum::<usize>()
            * verbs
            * adjectives
    }
}

/// Draws `count` distinct sentences of one template and number condition.
pub fn generate(
    kind: TemplateKind,
    subject_number: Number,
    embedded_np_number: Number,
    lexicon: &Lexicon,
    pool: &NounPool,
    seed: u64,
    count: usize,
) -> Result<Vec<AgreementSentence>> {
    let vocab = Vocabulary::new(lexicon)?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let verbs = lexicon.transitive_verb_pairs.len();
    let adjectives = lexicon.adjectives.len();
    let available = pool.combinations(verbs, adjectives);
    if count > available {
        return Err(Error::InsufficientPool {
            requested: count,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_subject: Vec<usize> = pool.subject.iter().map(|&s| pool.embedded_for(s).count()).collect();

    let mut out = Vec::with_capacity(count);
    for flat in index::sample(&mut rng, available, count) {
        let adj = flat % adjectives;
        let rest = flat / adjectives;
        let verb = rest % verbs;
        let mut pair_index = rest / verbs;
        let mut si = 0;
        while pair_index >= per_subject[si] {
            pair_index -= per_subject[si];
            si += 1;
        }
        let n1 = pool.subject[si];
        let n2 = pool.embedded_for(n1).nth(pair_index).expect("index within pool");
        out.push(build(
            &vocab,
            kind,
            n1,
            subject_number,
            n2,
            embedded_np_number,
            verb,
            adj,
        ));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn build(
    vocab: &Vocabulary,
    kind: TemplateKind,
    n1: usize,
    subject_number: Number,
    n2: usize,
    embedded_np_number: Number,
    verb: usize,
    adj: usize,
) -> AgreementSentence {
    let cls = 1;
    let sep = 2;
    let the = 4;
    let that = 5;
    let period = 6;
    let subject = vocab.noun(n1, subject_number);
    let embedded = vocab.noun(n2, embedded_np_number);
    let mask = vocab.mask_id();
    let adjective = vocab.adjective(adj);
    let tokens = match kind {
        TemplateKind::SubjectRelative => {
            let v = vocab.verb(verb, subject_number);
            vec![cls, the, subject, that, v, the, embedded, mask, adjective, period, sep]
        }
        TemplateKind::ObjectRelative => {
            let v = vocab.verb(verb, embedded_np_number);
            vec![cls, the, subject, that, the, embedded, v, mask, adjective, period, sep]
        }
    };
    AgreementSentence {
        kind,
        tokens,
        subject_index: SUBJECT_INDEX,
        main_verb_index: MAIN_VERB_INDEX,
        embedded_verb_index: Some(kind.embedded_verb_index()),
        subject_number,
        embedded_np_number,
        has_redundant_cue: kind == TemplateKind::SubjectRelative,
    }
}

/// `per_condition` sentences for every template and number combination,
/// shuffled together.
pub fn generate_all(
    lexicon: &Lexicon,
    pool: &NounPool,
    seed: u64,
    per_condition: usize,
) -> Result<Vec<AgreementSentence>> {
    let mut out = Vec::new();
    let mut cond = 0u64;
    for kind in [TemplateKind::SubjectRelative, TemplateKind::ObjectRelative] {
        for subj in [Number::Singular, Number::Plural] {
            for emb in [Number::Singular, Number::Plural] {
                let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(cond);
                out.extend(generate(kind, subj, emb, lexicon, pool, s, per_condition)?);
                cond += 1;
            }
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// `n / 2` singular-subject and `n / 2` plural-subject sentences, drawn
/// without replacement and shuffled.
pub fn sample_balanced(sentences: &[AgreementSentence], n: usize, seed: u64) -> Result<Vec<AgreementSentence>> {
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "balanced sample size must be even, got {n}"
        )));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for number in [Number::Singular, Number::Plural] {
        let idx: Vec<usize> = (0..sentences.len())
            .filter(|&i| sentences[i].subject_number == number)
            .collect();
        if idx.len() < half {
            return Err(Error::InsufficientPool {
                requested: half,
                available: idx.len(),
            });
        }
        for j in index::sample(&mut rng, idx.len(), half) {
            out.push(sentences[idx[j]].clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

//! File formats shared with an external encoder process.
//!
//! * activation files: labeled hidden vectors extracted elsewhere
//!   ```text
//!   "NACT" | u16 version | u32 layer | u8 role | u32 d | u32 n
//!          | n*d f64 | n label bytes (0 = singular, 1 = plural)
//!   ```
//! * probability records: CSV `sentence_id,p_is,p_are`, one row per corpus
//!   line, scored like the built-in model ("is" wins only if strictly more
//!   probable);
//! * a JSON manifest naming the encoder and tokenizer, mapping corpus word
//!   positions to encoder token positions, and listing the corpus,
//!   activation, subspace and probability files of one exchange.
//!
//! Subspaces travel in the `NSUB` format of [`crate::subspace`] and corpora
//! as JSONL records of [`crate::corpus`].

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::AgreementSentence;
use crate::error::{Error, Result};
use crate::harness::Condition;
use crate::probe::{LabeledVectorSet, Provenance};
use crate::subspace::{read_f64, read_u16, read_u32};
use crate::types::{Number, PositionRole};

pub const ACTIVATION_MAGIC: &[u8; 4] = b"NACT";
pub const ACTIVATION_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

fn role_byte(role: PositionRole) -> u8 {
    match role {
        PositionRole::Subject => 0,
        PositionRole::MainVerb => 1,
        PositionRole::EmbeddedVerb => 2,
    }
}

fn role_from_byte(b: u8) -> Result<PositionRole> {
    match b {
        0 => Ok(PositionRole::Subject),
        1 => Ok(PositionRole::MainVerb),
        2 => Ok(PositionRole::EmbeddedVerb),
        other => Err(Error::Format(format!("unknown position role byte {other}"))),
    }
}

pub fn write_activations<W: Write>(mut w: W, set: &LabeledVectorSet) -> Result<()> {
    let prov = set.provenance();
    w.write_all(ACTIVATION_MAGIC)?;
    w.write_all(&ACTIVATION_VERSION.to_le_bytes())?;
    w.write_all(&(prov.layer as u32).to_le_bytes())?;
    w.write_all(&[role_byte(prov.role)])?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for v in set.vectors() {
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    let labels: Vec<u8> = set.labels().iter().map(|l| (*l == Number::Plural) as u8).collect();
    w.write_all(&labels)?;
    Ok(())
}

pub fn read_activations<R: Read>(mut r: R) -> Result<LabeledVectorSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ACTIVATION_MAGIC {
        return Err(Error::Format("not an activation file".into()));
    }
    let version = read_u16(&mut r)?;
    if version != ACTIVATION_VERSION {
        return Err(Error::Format(format!("unsupported activation version {version}")));
    }
    let layer = read_u32(&mut r)? as usize;
    let mut role = [0u8; 1];
    r.read_exact(&mut role)?;
    let role = role_from_byte(role[0])?;
    let d = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        vectors.push(v);
    }
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    let labels = raw
        .into_iter()
        .map(|b| match b {
            0 => Ok(Number::Singular),
            1 => Ok(Number::Plural),
            other => Err(Error::Format(format!("invalid label byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after activations".into()));
    }
    LabeledVectorSet::new(vectors, labels, Provenance { layer, role })
}

pub fn save_activations(path: impl AsRef<Path>, set: &LabeledVectorSet) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_activations(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_activations(path: impl AsRef<Path>) -> Result<LabeledVectorSet> {
    read_activations(BufReader::new(std::fs::File::open(path)?))
}

/// Copula probabilities an external encoder assigned to one corpus line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRecord {
    pub sentence_id: usize,
    pub p_is: f64,
    pub p_are: f64,
}

impl ProbabilityRecord {
    pub fn predicted(&self) -> Number {
        if self.p_is > self.p_are {
            Number::Singular
        } else {
            Number::Plural
        }
    }
}

pub fn write_probability_records<W: Write>(w: W, records: &[ProbabilityRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_probability_records<R: Read>(r: R) -> Result<Vec<ProbabilityRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        let rec: ProbabilityRecord = rec?;
        if !(rec.p_is.is_finite() && rec.p_are.is_finite()) {
            return Err(Error::NonFinite("copula probability"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Conjugation accuracy of external predictions on `condition`, matching
/// records to sentences by index. Every sentence needs exactly one record.
pub fn score_probability_records(
    records: &[ProbabilityRecord],
    sentences: &[AgreementSentence],
    condition: Condition,
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut seen = vec![false; sentences.len()];
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in records {
        let s = sentences
            .get(r.sentence_id)
            .ok_or_else(|| Error::Format(format!("record for unknown sentence {}", r.sentence_id)))?;
        if std::mem::replace(&mut seen[r.sentence_id], true) {
            return Err(Error::Format(format!(
                "duplicate record for sentence {}",
                r.sentence_id
            )));
        }
        if condition.admits(s) {
            total += 1;
            hits += (r.predicted() == s.subject_number) as usize;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("no record for sentence {missing}")));
    }
    if total == 0 {
        return Err(Error::EmptyData);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub layer: usize,
    pub role: PositionRole,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceEntry {
    pub layer: usize,
    pub role: PositionRole,
    pub k: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEntry {
    /// Free-form description of the intervention, e.g. `"layer 8 global"`.
    pub label: String,
    pub layer: Option<usize>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub path: PathBuf,
}

/// Encoder token positions of one corpus sentence (first subword of each
/// word).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIndices {
    pub sentence_id: usize,
    pub subject: usize,
    pub main_verb: usize,
    pub embedded_verb: Option<usize>,
}

/// Index of the files in one exchange directory. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeManifest {
    pub version: u32,
    pub encoder: String,
    /// Identifies the tokenizer the token indices refer to.
    #[serde(default)]
    pub tokenizer_fingerprint: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub corpus: PathBuf,
    /// Corpus word positions resolved to encoder token positions; sentences
    /// that could not be resolved are listed in `skipped`.
    #[serde(default)]
    pub token_indices: Vec<TokenIndices>,
    #[serde(default)]
    pub skipped: Vec<usize>,
    #[serde(default)]
    pub activations: Vec<ActivationEntry>,
    #[serde(default)]
    pub subspaces: Vec<SubspaceEntry>,
    #[serde(default)]
    pub probabilities: Vec<ProbabilityEntry>,
}

impl ExchangeManifest {
    pub fn new(encoder: impl Into<String>, hidden_dim: usize, num_layers: usize, corpus: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            encoder: encoder.into(),
            tokenizer_fingerprint: String::new(),
            hidden_dim,
            num_layers,
            corpus: corpus.into(),
            token_indices: Vec::new(),
            skipped: Vec::new(),
            activations: Vec::new(),
            subspaces: Vec::new(),
            probabilities: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", self.version)));
        }
        if let Some(e) = self.activations.iter().find(|e| e.layer > self.num_layers) {
            return Err(Error::Format(format!(
                "activation layer {} exceeds {}",
                e.layer, self.num_layers
            )));
        }
        if let Some(e) = self
            .subspaces
            .iter()
            .find(|e| e.layer > self.num_layers || e.k > self.hidden_dim)
        {
            return Err(Error::Format(format!(
                "subspace entry out of range: layer {} k {}",
                e.layer, e.k
            )));
        }
        let mut ids: Vec<usize> = self
            .token_indices
            .iter()
            .map(|t| t.sentence_id)
            .chain(self.skipped.iter().copied())
            .collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Format(format!("sentence {} listed twice", w[0])));
        }
        Ok(())
    }

    /// Token indices of `sentence_id`; `None` if it was skipped or is absent.
    pub fn indices(&self, sentence_id: usize) -> Option<&TokenIndices> {
        self.token_indices.iter().find(|t| t.sentence_id == sentence_id)
    }

    /// Checks that every one of `n` corpus sentences is resolved or skipped.
    pub fn check_coverage(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for id in self
            .token_indices
            .iter()
            .map(|t| t.sentence_id)
            .chain(self.skipped.iter().copied())
        {
            match seen.get_mut(id) {
                Some(s) => *s = true,
                None => return Err(Error::Format(format!("sentence {id} outside corpus of {n}"))),
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::Format(format!("sentence {i} has no token indices"))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> LabeledVectorSet {
        LabeledVectorSet::new(
            vec![vec![1.0, -2.5, 0.125], vec![0.0, 3.0, -1.0]],
            vec![Number::Singular, Number::Plural],
            Provenance {
                layer: 8,
                role: PositionRole::MainVerb,
            },
        )
        .unwrap()
    }

    #[test]
    fn activation_layout_and_round_trip() {
        let mut buf = Vec::new();
        write_activations(&mut buf, &set()).unwrap();
        assert_eq!(&buf[..4], b"NACT");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 8);
        assert_eq!(buf[10], 1);
        assert_eq!(u32::from_le_bytes(buf[11..15].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[15..19].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[19..27].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 19 + 6 * 8 + 2);
        assert_eq!(&buf[buf.len() - 2..], &[0, 1]);
        assert_eq!(read_activations(&buf[..]).unwrap(), set());
    }

    #[test]
    fn activation_errors() {
        let mut buf = Vec::new();
        write_activations(&mut buf, &set()).unwrap();
        let mut bad = buf.clone();
        *bad.last_mut().unwrap() = 7;
        assert!(matches!(read_activations(&bad[..]), Err(Error::Format(_))));
        assert!(read_activations(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[10] = 9;
        assert!(read_activations(&bad[..]).is_err());
    }

    #[test]
    fn manifest_validation() {
        let mut m = ExchangeManifest::new("external", 768, 12, "corpus.jsonl");
        m.subspaces.push(SubspaceEntry {
            layer: 8,
            role: PositionRole::Subject,
            k: 8,
            path: "s.nsub".into(),
        });
        m.validate().unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ExchangeManifest>(&text).unwrap(), m);
        m.activations.push(ActivationEntry {
            layer: 13,
            role: PositionRole::Subject,
            path: "a.nact".into(),
        });
        assert!(m.validate().is_err());
    }

    #[test]
    fn token_index_coverage() {
        let mut m = ExchangeManifest::new("external", 768, 12, "corpus.jsonl");
        m.token_indices.push(TokenIndices {
            sentence_id: 0,
            subject: 2,
            main_verb: 3,
            embedded_verb: None,
        });
        m.skipped.push(2);
        m.validate().unwrap();
        assert!(m.check_coverage(3).is_err());
        m.token_indices.push(TokenIndices {
            sentence_id: 1,
            subject: 2,
            main_verb: 6,
            embedded_verb: Some(5),
        });
        m.check_coverage(3).unwrap();
        assert!(m.check_coverage(2).is_err());
        assert_eq!(m.indices(1).unwrap().main_verb, 6);
        assert!(m.indices(2).is_none());
        m.skipped.push(1);
        assert!(m.validate().is_err());
    }
}

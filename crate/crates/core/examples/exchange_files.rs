//! Lay out an exchange directory for an external encoder: corpus,
//! activations, a subspace, copula probabilities and the manifest that ties
//! them together. The probabilities here are made up; an external encoder
//! would write them.

use numspace::corpus::{generate_all, write_jsonl, Lexicon, NounPool, Vocabulary};
use numspace::exchange::{
    load_activations, read_probability_records, save_activations, score_probability_records, write_probability_records,
    ActivationEntry, ExchangeManifest, ProbabilityEntry, ProbabilityRecord, SubspaceEntry, TokenIndices,
};
use numspace::harness::Condition;
use numspace::probe::{LabeledVectorSet, Provenance};
use numspace::subspace::random_subspace;
use numspace::{Number, PositionRole};

fn main() -> numspace::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| "exchange".into());
    std::fs::create_dir_all(&dir)?;
    let lexicon = Lexicon::default();
    let vocab = Vocabulary::new(&lexicon)?;
    let corpus = generate_all(&lexicon, &NounPool::test(&lexicon), 0, 4)?;
    write_jsonl(std::fs::File::create(dir.join("corpus.jsonl"))?, &corpus, &vocab)?;

    let d = 16;
    let vectors: Vec<Vec<f64>> = corpus
        .iter()
        .map(|s| {
            (0..d)
                .map(|i| {
                    if i == 0 {
                        s.subject_number.sign()
                    } else {
                        0.1 * i as f64
                    }
                })
                .collect()
        })
        .collect();
    let labels: Vec<Number> = corpus.iter().map(|s| s.subject_number).collect();
    let acts = LabeledVectorSet::new(
        vectors,
        labels,
        Provenance {
            layer: 8,
            role: PositionRole::Subject,
        },
    )?;
    save_activations(dir.join("layer8-subject.nact"), &acts)?;
    assert_eq!(load_activations(dir.join("layer8-subject.nact"))?, acts);

    random_subspace(d, 4, 1)?.save(dir.join("layer8-subject.nsub"))?;

    let records: Vec<ProbabilityRecord> = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if s.subject_number == Number::Singular { 0.8 } else { 0.3 };
            ProbabilityRecord {
                sentence_id: i,
                p_is: p,
                p_are: 1.0 - p,
            }
        })
        .collect();
    write_probability_records(std::fs::File::create(dir.join("baseline.csv"))?, &records)?;
    let back = read_probability_records(std::fs::File::open(dir.join("baseline.csv"))?)?;
    for c in Condition::ALL {
        println!(
            "accuracy ({}) {:.3}",
            c.as_str(),
            score_probability_records(&back, &corpus, c)?
        );
    }

    let mut manifest = ExchangeManifest::new("example-encoder", d, 12, "corpus.jsonl");
    manifest.tokenizer_fingerprint = "whitespace".into();
    // A whitespace tokenizer keeps word positions; a subword tokenizer
    // would shift them.
    manifest.token_indices = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| TokenIndices {
            sentence_id: i,
            subject: s.subject_index,
            main_verb: s.main_verb_index,
            embedded_verb: s.embedded_verb_index,
        })
        .collect();
    manifest.check_coverage(corpus.len())?;
    manifest.activations.push(ActivationEntry {
        layer: 8,
        role: PositionRole::Subject,
        path: "layer8-subject.nact".into(),
    });
    manifest.subspaces.push(SubspaceEntry {
        layer: 8,
        role: PositionRole::Subject,
        k: 4,
        path: "layer8-subject.nsub".into(),
    });
    manifest.probabilities.push(ProbabilityEntry {
        label: "baseline".into(),
        layer: None,
        alpha: None,
        k: None,
        path: "baseline.csv".into(),
    });
    manifest.save(dir.join("manifest.json"))?;
    println!("{}", std::fs::read_to_string(dir.join("manifest.json"))?);
    Ok(())
}

//! Generate templated agreement sentences and write them as JSONL.

use numspace::corpus::{generate_all, read_jsonl, write_jsonl, Lexicon, NounPool, Vocabulary};

fn main() -> numspace::Result<()> {
    let lexicon = Lexicon::default();
    let vocab = Vocabulary::new(&lexicon)?;
    let train = generate_all(&lexicon, &NounPool::train(&lexicon), 0, 2)?;
    let test = generate_all(&lexicon, &NounPool::test(&lexicon), 1, 1)?;
    println!(
        "vocabulary: {} tokens, {} reserved test nouns",
        vocab.len(),
        lexicon.reserved_nouns()
    );
    for s in train.iter().chain(&test) {
        println!(
            "{:<58} subject {:<8} cue {}",
            s.text(&vocab)?,
            s.subject_number.as_str(),
            if s.has_redundant_cue { "redundant" } else { "none" }
        );
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &test, &vocab)?;
    print!("{}", String::from_utf8_lossy(&buf));
    assert_eq!(read_jsonl(&buf[..], &vocab)?, test);
    Ok(())
}

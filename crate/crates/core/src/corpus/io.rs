//! Corpus, model and prior persistence.
//!
//! Corpus files are JSON lines: a header `{"version", "vocab", "seed"}`
//! followed by one `{"prompt": [...], "response": [...]}` record per example.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusModel, Example, PriorTable};
use crate::error::{Error, Result};
use crate::vocab::VocabSpec;

pub const CORPUS_VERSION: &str = "mdlab-corpus/1";
pub const MODEL_VERSION: &str = "mdlab-corpus-model/1";
pub const PRIOR_VERSION: &str = "mdlab-prior/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: String,
    pub vocab: VocabSpec,
    pub seed: u64,
}

pub fn write_corpus<W: Write>(mut w: W, vocab: &VocabSpec, seed: u64, corpus: &[Example]) -> Result<()> {
    let header = CorpusHeader {
        version: CORPUS_VERSION.into(),
        vocab: vocab.clone(),
        seed,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ex in corpus {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(r: R) -> Result<(CorpusHeader, Vec<Example>)> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| Error::parse(1, "missing header line"))??;
    let header: CorpusHeader = serde_json::from_str(&first).map_err(|e| Error::parse(1, e.to_string()))?;
    if header.version != CORPUS_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CORPUS_VERSION.into(),
        });
    }
    let mut corpus = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if let Some(&bad) = ex
            .prompt
            .iter()
            .chain(&ex.response)
            .find(|&&t| !header.vocab.is_content(t))
        {
            let what = if (bad as usize) >= header.vocab.alphabet_size() {
                "outside the alphabet"
            } else {
                "a reserved id"
            };
            return Err(Error::parse(lineno, format!("token {bad} is {what}")));
        }
        if ex.prompt.is_empty() {
            return Err(Error::parse(lineno, "empty prompt"));
        }
        corpus.push(ex);
    }
    Ok((header, corpus))
}

pub fn save_corpus(path: &Path, vocab: &VocabSpec, seed: u64, corpus: &[Example]) -> Result<()> {
    write_corpus(BufWriter::new(fs::File::create(path)?), vocab, seed, corpus)
}

pub fn load_corpus(path: &Path) -> Result<(CorpusHeader, Vec<Example>)> {
    read_corpus(fs::File::open(path)?)
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    version: String,
    #[serde(flatten)]
    body: T,
}

fn save_versioned<T: Serialize>(path: &Path, version: &str, body: &T) -> Result<()> {
    let mut text = serde_json::to_string(&Versioned {
        version: version.to_string(),
        body,
    })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_versioned<T: for<'de> Deserialize<'de>>(path: &Path, version: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let v: Versioned<T> = serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    if v.version != version {
        return Err(Error::Version {
            found: v.version,
            expected: version.into(),
        });
    }
    Ok(v.body)
}

impl CorpusModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_versioned(path, MODEL_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = load_versioned(path, MODEL_VERSION)?;
        m.validate()?;
        Ok(m)
    }
}

impl PriorTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_versioned(path, PRIOR_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_versioned(path, PRIOR_VERSION)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus_seeded;
    use crate::corpus::tests::three_state;

    #[test]
    fn corpus_round_trip() {
        let m = three_state();
        let corpus = generate_corpus_seeded(&m, 300, 4);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &m.vocab, 4, &corpus).unwrap();
        let (h, back) = read_corpus(&buf[..]).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(h.seed, 4);
        let mut again = Vec::new();
        write_corpus(&mut again, &h.vocab, h.seed, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn out_of_alphabet_token_rejected_with_line() {
        let text = format!(
            "{{\"version\":\"{CORPUS_VERSION}\",\"vocab\":{{\"content_size\":3}},\"seed\":0}}\n\
             {{\"prompt\":[0],\"response\":[1]}}\n\
             {{\"prompt\":[0],\"response\":[9]}}\n"
        );
        match read_corpus(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!(
            "{{\"version\":\"{CORPUS_VERSION}\",\"vocab\":{{\"content_size\":3}},\"seed\":0}}\n\
             {{\"prompt\":[0],\"response\":[1}}\n"
        );
        assert!(matches!(
            read_corpus(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn version_mismatch_names_both() {
        let text = "{\"version\":\"mdlab-corpus/0\",\"vocab\":{\"content_size\":3},\"seed\":0}\n";
        let err = read_corpus(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mdlab-corpus/0") && msg.contains(CORPUS_VERSION), "{msg}");
    }

    #[test]
    fn model_and_prior_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = three_state();
        m.save(&dir.path().join("m.json")).unwrap();
        assert_eq!(CorpusModel::load(&dir.path().join("m.json")).unwrap(), m);
        let corpus = generate_corpus_seeded(&m, 100, 1);
        let p = PriorTable::compute(&corpus, m.support_size()).unwrap();
        p.save(&dir.path().join("p.json")).unwrap();
        assert_eq!(PriorTable::load(&dir.path().join("p.json")).unwrap(), p);
    }
}

//! Preprocessed bag-of-words corpora: vocabulary, sparse documents and splits.
//!
//! On disk a corpus is a directory holding `vocab.txt` (one token per line,
//! index = line number) and one `<split>.jsonl` file per split, each line
//! `{"id": "...", "bow": [[word_id, count], ...]}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed line: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}:{line}: word_id out of range ({word_id} >= V={vocab_size})")]
    WordIdOutOfRange {
        file: String,
        line: usize,
        word_id: usize,
        vocab_size: usize,
    },
    #[error("vocabulary line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("vocabulary line {line}: empty token")]
    EmptyToken { line: usize },
    #[error("{file}:{line}: document {id:?} has zero tokens")]
    EmptyDocument { file: String, line: usize, id: String },
    #[error("document id {id:?} appears in more than one split")]
    DuplicateDocId { id: String },
    #[error("split {0:?} does not exist")]
    MissingSplit(String),
    #[error("split {0:?} is empty")]
    EmptySplit(String),
    #[error("word {word_id} never occurs in split {split:?}; use a positive background smoothing")]
    UnseenWord { split: String, word_id: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(CorpusError::EmptyToken { line: i + 1 });
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(CorpusError::DuplicateToken {
                    line: i + 1,
                    token: tok.clone(),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

/// A document in canonical sparse form: strictly increasing word ids, positive counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowDocument {
    pub id: String,
    entries: Vec<(usize, u32)>,
    length: u64,
}

impl BowDocument {
    /// Canonicalizes `entries`: sorts by word id and merges repeated ids.
    /// Zero counts are dropped. Returns `None` when no tokens remain.
    pub fn new(id: impl Into<String>, mut entries: Vec<(usize, u32)>) -> Option<Self> {
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable_by_key(|&(w, _)| w);
        let mut merged: Vec<(usize, u32)> = Vec::with_capacity(entries.len());
        for (w, c) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == w => last.1 += c,
                _ => merged.push((w, c)),
            }
        }
        let length = merged.iter().map(|&(_, c)| c as u64).sum();
        (length > 0).then(|| Self {
            id: id.into(),
            entries: merged,
            length,
        })
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    /// Total token count `N_d`.
    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn dense_counts(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(w, c) in &self.entries {
            out[w] = c as f64;
        }
        out
    }
}

#[derive(Deserialize)]
struct DocLine {
    id: String,
    bow: Vec<(i64, i64)>,
}

#[derive(Serialize)]
struct DocLineOut<'a> {
    id: &'a str,
    bow: &'a [(usize, u32)],
}

/// Parses one split in JSON Lines form. `file` is only used in diagnostics.
pub fn parse_split(text: &str, vocab_size: usize, file: &str) -> Result<Vec<BowDocument>, CorpusError> {
    let mut docs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            file: file.to_string(),
            line,
            reason,
        };
        let parsed: DocLine = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        let mut entries = Vec::with_capacity(parsed.bow.len());
        for (w, c) in parsed.bow {
            if w < 0 || c < 0 || c > u32::MAX as i64 {
                return Err(malformed(format!("invalid pair [{w},{c}]")));
            }
            let w = w as usize;
            if w >= vocab_size {
                return Err(CorpusError::WordIdOutOfRange {
                    file: file.to_string(),
                    line,
                    word_id: w,
                    vocab_size,
                });
            }
            if c == 0 {
                return Err(malformed(format!("zero count for word {w}")));
            }
            entries.push((w, c as u32));
        }
        let doc = BowDocument::new(parsed.id.clone(), entries).ok_or(CorpusError::EmptyDocument {
            file: file.to_string(),
            line,
            id: parsed.id,
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_split(docs: &[BowDocument], path: &Path) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for d in docs {
        let line = serde_json::to_string(&DocLineOut {
            id: &d.id,
            bow: &d.entries,
        })
        .expect("document serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct BowCorpus {
    vocabulary: Vocabulary,
    splits: BTreeMap<String, Vec<BowDocument>>,
}

impl BowCorpus {
    pub fn new(
        vocabulary: Vocabulary,
        splits: BTreeMap<String, Vec<BowDocument>>,
    ) -> Result<Self, CorpusError> {
        let v = vocabulary.len();
        let mut seen = HashSet::new();
        for (name, docs) in &splits {
            for (i, d) in docs.iter().enumerate() {
                if let Some(&(w, _)) = d.entries.iter().find(|&&(w, _)| w >= v) {
                    return Err(CorpusError::WordIdOutOfRange {
                        file: name.clone(),
                        line: i + 1,
                        word_id: w,
                        vocab_size: v,
                    });
                }
                if !seen.insert(d.id.as_str()) {
                    return Err(CorpusError::DuplicateDocId { id: d.id.clone() });
                }
            }
        }
        Ok(Self { vocabulary, splits })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn split(&self, name: &str) -> Result<&[BowDocument], CorpusError> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CorpusError::MissingSplit(name.to_string()))
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.splits.contains_key(name)
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    pub fn num_docs(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    /// Log background frequencies `m_v = log((n_v + ε) / (N + V·ε))` over one split.
    pub fn background_log_freq(&self, split: &str, smoothing: f64) -> Result<Vec<f64>, CorpusError> {
        let docs = self.split(split)?;
        if docs.is_empty() {
            return Err(CorpusError::EmptySplit(split.to_string()));
        }
        let v = self.vocab_size();
        let mut counts = vec![0.0f64; v];
        let mut total = 0.0;
        for d in docs {
            for &(w, c) in &d.entries {
                counts[w] += c as f64;
                total += c as f64;
            }
        }
        if smoothing <= 0.0 {
            if let Some(word_id) = counts.iter().position(|&c| c == 0.0) {
                return Err(CorpusError::UnseenWord {
                    split: split.to_string(),
                    word_id,
                });
            }
        }
        let denom = total + v as f64 * smoothing;
        Ok(counts.iter().map(|&c| ((c + smoothing) / denom).ln()).collect())
    }

    /// Distinct word ids per document, ascending.
    pub fn doc_term_presence(&self, split: &str) -> Result<Vec<Vec<usize>>, CorpusError> {
        Ok(self
            .split(split)?
            .iter()
            .map(|d| d.entries.iter().map(|&(w, _)| w).collect())
            .collect())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.vocabulary.write_to(&dir.join(VOCAB_FILE))?;
        for (name, docs) in &self.splits {
            write_split(docs, &dir.join(format!("{name}.jsonl")))?;
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Loads a vocabulary file and the named split files.
pub fn load_corpus(
    vocab_path: &Path,
    split_paths: &BTreeMap<String, PathBuf>,
) -> Result<BowCorpus, CorpusError> {
    let vocabulary = Vocabulary::parse(&read_to_string(vocab_path)?)?;
    let mut splits = BTreeMap::new();
    for (name, path) in split_paths {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(io_err(path))?);
            text.push('\n');
        }
        let docs = parse_split(&text, vocabulary.len(), &path.display().to_string())?;
        splits.insert(name.clone(), docs);
    }
    BowCorpus::new(vocabulary, splits)
}

/// Loads `vocab.txt` plus whichever of `train/dev/test.jsonl` exist in `dir`.
pub fn load_corpus_dir(dir: &Path) -> Result<BowCorpus, CorpusError> {
    let split_paths: BTreeMap<String, PathBuf> = SPLIT_NAMES
        .iter()
        .map(|s| (s.to_string(), dir.join(format!("{s}.jsonl"))))
        .filter(|(_, p)| p.exists())
        .collect();
    load_corpus(&dir.join(VOCAB_FILE), &split_paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_from(vocab: &str, train: &str) -> Result<BowCorpus, CorpusError> {
        let vocabulary = Vocabulary::parse(vocab)?;
        let docs = parse_split(train, vocabulary.len(), "train.jsonl")?;
        BowCorpus::new(vocabulary, BTreeMap::from([("train".to_string(), docs)]))
    }

    #[test]
    fn loads_minimal_corpus() {
        let c = corpus_from("a\nb\nc\n", r#"{"id":"d0","bow":[[0,2],[2,1]]}"#).unwrap();
        assert_eq!(c.vocab_size(), 3);
        let docs = c.split("train").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].len(), 3);
    }

    #[test]
    fn canonicalizes_entry_order() {
        let c = corpus_from("a\nb\nc\n", r#"{"id":"d0","bow":[[2,1],[0,2]]}"#).unwrap();
        assert_eq!(c.split("train").unwrap()[0].entries(), &[(0, 2), (2, 1)]);
    }

    #[test]
    fn rejects_out_of_range_word() {
        let err = corpus_from("a\nb\nc\n", r#"{"id":"d1","bow":[[5,1]]}"#).unwrap_err();
        assert!(err.to_string().contains("word_id out of range"), "{err}");
    }

    #[test]
    fn reports_malformed_line_number() {
        let text = "{\"id\":\"d0\",\"bow\":[[0,1]]}\n{\"id\":\"d1\",\"bow\":[[0,]]}\n";
        let err = corpus_from("a\nb\n", text).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicate_token_and_empty_doc() {
        assert!(matches!(
            Vocabulary::parse("a\nb\na\n"),
            Err(CorpusError::DuplicateToken { line: 3, .. })
        ));
        let err = corpus_from("a\n", r#"{"id":"d0","bow":[]}"#).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyDocument { .. }));
    }

    #[test]
    fn rejects_ids_shared_across_splits() {
        let vocab = Vocabulary::parse("a\n").unwrap();
        let d = BowDocument::new("x", vec![(0, 1)]).unwrap();
        let splits = BTreeMap::from([
            ("train".to_string(), vec![d.clone()]),
            ("dev".to_string(), vec![d]),
        ]);
        assert!(matches!(
            BowCorpus::new(vocab, splits),
            Err(CorpusError::DuplicateDocId { .. })
        ));
    }

    #[test]
    fn background_frequencies() {
        let ln = f64::ln;
        let c = corpus_from("a\nb\n", "{\"id\":\"x\",\"bow\":[[0,1],[1,1]]}").unwrap();
        let m = c.background_log_freq("train", 0.0).unwrap();
        assert!((m[0] - ln(0.5)).abs() < 1e-15 && (m[1] - ln(0.5)).abs() < 1e-15);

        let c = corpus_from("a\nb\n", "{\"id\":\"x\",\"bow\":[[0,3],[1,1]]}").unwrap();
        let m = c.background_log_freq("train", 0.0).unwrap();
        assert!((m[0] - ln(0.75)).abs() < 1e-15 && (m[1] - ln(0.25)).abs() < 1e-15);

        let c = corpus_from("a\nb\n", "{\"id\":\"x\",\"bow\":[[0,1]]}").unwrap();
        assert!(matches!(
            c.background_log_freq("train", 0.0),
            Err(CorpusError::UnseenWord { word_id: 1, .. })
        ));
        let m = c.background_log_freq("train", 1.0).unwrap();
        assert!((m[0] - ln(2.0 / 3.0)).abs() < 1e-15 && (m[1] - ln(1.0 / 3.0)).abs() < 1e-15);

        let empty = BowCorpus::new(
            Vocabulary::parse("a\n").unwrap(),
            BTreeMap::from([("train".to_string(), vec![])]),
        )
        .unwrap();
        assert!(matches!(
            empty.background_log_freq("train", 0.0),
            Err(CorpusError::EmptySplit(_))
        ));
    }

    #[test]
    fn presence_sets() {
        let text = "{\"id\":\"x\",\"bow\":[[0,5],[3,1]]}\n{\"id\":\"y\",\"bow\":[[0,1]]}\n";
        let c = corpus_from("a\nb\nc\nd\n", text).unwrap();
        let p = c.doc_term_presence("train").unwrap();
        assert_eq!(p, vec![vec![0, 3], vec![0]]);

        let empty = BowCorpus::new(
            Vocabulary::parse("a\n").unwrap(),
            BTreeMap::from([("dev".to_string(), vec![])]),
        )
        .unwrap();
        assert!(empty.doc_term_presence("dev").unwrap().is_empty());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = "{\"id\":\"x\",\"bow\":[[2,5],[0,1]]}\n{\"id\":\"y\",\"bow\":[[1,1]]}\n";
        let c = corpus_from("a\nb\nc\n", text).unwrap();
        c.write_dir(dir.path()).unwrap();
        let back = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(back.vocabulary(), c.vocabulary());
        assert_eq!(back.split("train").unwrap(), c.split("train").unwrap());
        let written = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(written.lines().next().unwrap(), r#"{"id":"x","bow":[[0,1],[2,5]]}"#);
    }

    proptest! {
        #[test]
        fn background_normalizes(
            counts in prop::collection::vec(prop::collection::vec((0usize..12, 1u32..20), 1..8), 1..10),
            smoothing in prop_oneof![Just(0.0), 0.01f64..2.0],
        ) {
            let vocab = Vocabulary::new((0..12).map(|i| format!("w{i}")).collect()).unwrap();
            let docs: Vec<BowDocument> = counts
                .into_iter()
                .enumerate()
                .map(|(i, e)| BowDocument::new(format!("d{i}"), e).unwrap())
                .collect();
            let presence_ok = docs.iter().all(|d| d.entries().len() <= d.len() as usize);
            prop_assert!(presence_ok);
            let c = BowCorpus::new(vocab, BTreeMap::from([("train".into(), docs)])).unwrap();
            match c.background_log_freq("train", smoothing) {
                Ok(m) => {
                    let total: f64 = m.iter().map(|x| x.exp()).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    prop_assert!(m.iter().all(|x| x.is_finite()));
                }
                Err(e) => { let unseen = matches!(e, CorpusError::UnseenWord { .. }); prop_assert!(smoothing == 0.0 && unseen) },
            }
        }
    }
}

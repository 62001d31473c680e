//! Topic extraction, NPMI coherence, redundancy diagnostics and perplexity.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowDocument, Vocabulary};
use crate::ntm::{decode, encode_eval, kl_term, recon_loss, ModelError, ModelParams, PriorLN};

pub const DEFAULT_TOP_N: usize = 10;
/// Topic lists must have this length for the redundancy diagnostic.
pub const REDUNDANCY_TOP_N: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("requested {requested} top words but the vocabulary has {vocab_size}")]
    TooManyWords { requested: usize, vocab_size: usize },
    #[error("topic {topic} has {len} words; need at least 2 for NPMI")]
    TopicTooShort { topic: usize, len: usize },
    #[error("topic {topic} has {len} words; the redundancy diagnostic needs exactly {REDUNDANCY_TOP_N}")]
    WrongTopicLength { topic: usize, len: usize },
    #[error("reference counts have zero documents")]
    NoDocuments,
    #[error("no topics given")]
    NoTopics,
    #[error("split is empty")]
    EmptySplit,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed external counts file: {0}")]
    MalformedCounts(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWordList {
    pub topic_id: usize,
    /// `(word_id, weight)` with non-increasing weights.
    pub words: Vec<(usize, f64)>,
}

impl TopicWordList {
    pub fn word_ids(&self) -> Vec<usize> {
        self.words.iter().map(|&(w, _)| w).collect()
    }
}

/// The `n` highest-weight words of each row of `B` (background excluded).
/// Ties go to the lower word id.
pub fn top_words(params: &ModelParams, n: usize) -> Result<Vec<TopicWordList>, EvalError> {
    let v = params.hyper.vocab_size;
    if n > v {
        return Err(EvalError::TooManyWords {
            requested: n,
            vocab_size: v,
        });
    }
    Ok((0..params.hyper.topics)
        .map(|k| top_words_of_row(k, params.beta.row(k), n))
        .collect())
}

pub fn top_words_of_row(topic_id: usize, row: &[f64], n: usize) -> TopicWordList {
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..row.len()).collect();
    if n > 0 && n < order.len() {
        order.select_nth_unstable_by(n - 1, cmp);
        order.truncate(n);
    }
    order.sort_unstable_by(cmp);
    order.truncate(n);
    TopicWordList {
        topic_id,
        words: order.into_iter().map(|w| (w, row[w])).collect(),
    }
}

/// Document frequencies and pairwise joint document frequencies over a word universe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CooccurrenceCounts {
    pub doc_count: u64,
    df: HashMap<usize, u64>,
    joint: HashMap<(usize, usize), u64>,
}

impl CooccurrenceCounts {
    pub fn new(doc_count: u64) -> Self {
        Self {
            doc_count,
            ..Self::default()
        }
    }

    pub fn df(&self, w: usize) -> u64 {
        self.df.get(&w).copied().unwrap_or(0)
    }

    /// Joint count of an unordered pair; missing pairs are zero.
    pub fn joint(&self, a: usize, b: usize) -> u64 {
        let key = if a < b { (a, b) } else { (b, a) };
        self.joint.get(&key).copied().unwrap_or(0)
    }

    pub fn set_df(&mut self, w: usize, n: u64) {
        self.df.insert(w, n);
    }

    pub fn set_joint(&mut self, a: usize, b: usize, n: u64) {
        let key = if a < b { (a, b) } else { (b, a) };
        self.joint.insert(key, n);
    }
}

/// Binary document-level co-occurrence counts restricted to `universe`.
/// `presence` holds the ascending distinct word ids of each document.
pub fn count_cooccurrence(presence: &[Vec<usize>], universe: &[usize]) -> CooccurrenceCounts {
    let universe: BTreeSet<usize> = universe.iter().copied().collect();
    let mut counts = CooccurrenceCounts::new(presence.len() as u64);
    for &w in &universe {
        counts.df.insert(w, 0);
    }
    let mut present = Vec::new();
    for doc in presence {
        present.clear();
        present.extend(doc.iter().copied().filter(|w| universe.contains(w)));
        present.sort_unstable();
        present.dedup();
        for (i, &a) in present.iter().enumerate() {
            *counts.df.get_mut(&a).unwrap() += 1;
            for &b in &present[i + 1..] {
                *counts.joint.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Normalized PMI of a word pair, `log(p(a,b)/(p(a)p(b))) / −log p(a,b)`.
///
/// Pairs that never co-occur (or involve an unseen word) score −1. A pair
/// present in every document scores 1.
pub fn npmi_pair(counts: &CooccurrenceCounts, a: usize, b: usize) -> f64 {
    let n = counts.doc_count as f64;
    let (da, db, j) = (counts.df(a), counts.df(b), counts.joint(a, b));
    if da == 0 || db == 0 || j == 0 {
        return -1.0;
    }
    if j == counts.doc_count {
        return 1.0;
    }
    let p_ab = j as f64 / n;
    let p_a = da as f64 / n;
    let p_b = db as f64 / n;
    (p_ab / (p_a * p_b)).ln() / -p_ab.ln()
}

/// Mean NPMI over all unordered pairs of the topic's words.
pub fn npmi_topic(topic: &TopicWordList, counts: &CooccurrenceCounts) -> Result<f64, EvalError> {
    if counts.doc_count == 0 {
        return Err(EvalError::NoDocuments);
    }
    let words = topic.word_ids();
    if words.len() < 2 {
        return Err(EvalError::TopicTooShort {
            topic: topic.topic_id,
            len: words.len(),
        });
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            sum += npmi_pair(counts, words[i], words[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

pub fn npmi_model(topics: &[TopicWordList], counts: &CooccurrenceCounts) -> Result<f64, EvalError> {
    if topics.is_empty() {
        return Err(EvalError::NoTopics);
    }
    let scores = topics
        .iter()
        .map(|t| npmi_topic(t, counts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Union of the topics' word ids, the universe needed to score them.
pub fn topic_universe(topics: &[TopicWordList]) -> Vec<usize> {
    let set: BTreeSet<usize> = topics.iter().flat_map(|t| t.word_ids()).collect();
    set.into_iter().collect()
}

#[derive(Deserialize)]
struct ExternalCountsFile {
    doc_count: u64,
    df: HashMap<String, u64>,
    #[serde(default)]
    joint: Vec<(String, String, u64)>,
}

pub fn external_counts_from_str(text: &str, vocab: &Vocabulary) -> Result<CooccurrenceCounts, EvalError> {
    let file: ExternalCountsFile =
        serde_json::from_str(text).map_err(|e| EvalError::MalformedCounts(e.to_string()))?;
    let mut counts = CooccurrenceCounts::new(file.doc_count);
    let mut dropped = 0usize;
    for (tok, n) in &file.df {
        match vocab.id(tok) {
            Some(w) => counts.set_df(w, *n),
            None => dropped += 1,
        }
    }
    for (a, b, n) in &file.joint {
        if let (Some(x), Some(y)) = (vocab.id(a), vocab.id(b)) {
            if x != y {
                counts.set_joint(x, y, *n);
            }
        }
    }
    if dropped > 0 {
        log::warn!("external counts: ignored {dropped} reference words missing from the vocabulary");
    }
    Ok(counts)
}

/// Loads precomputed reference counts (`{"doc_count", "df", "joint"}`),
/// keeping only words present in `vocab`.
pub fn external_counts_load(path: &Path, vocab: &Vocabulary) -> Result<CooccurrenceCounts, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    external_counts_from_str(&text, vocab)
}

/// Number of unordered topic pairs whose top-10 word sets coincide.
pub fn redundancy_pairs(topics: &[TopicWordList]) -> Result<usize, EvalError> {
    let sets = topics
        .iter()
        .map(|t| {
            if t.words.len() != REDUNDANCY_TOP_N {
                Err(EvalError::WrongTopicLength {
                    topic: t.topic_id,
                    len: t.words.len(),
                })
            } else {
                Ok(t.word_ids().into_iter().collect::<BTreeSet<_>>())
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i] == sets[j] {
                pairs += 1;
            }
        }
    }
    Ok(pairs)
}

/// A model is filtered out when more than one pair of topics is identical.
pub fn fails_redundancy_filter(redundant_pairs: usize) -> bool {
    redundant_pairs > 1
}

/// `exp(Σ_d (recon_d + KL_d) / Σ_d N_d)` with eval-mode `θ`.
pub fn perplexity(docs: &[BowDocument], params: &ModelParams, prior: &PriorLN) -> Result<f64, EvalError> {
    if docs.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut total = 0.0;
    let mut tokens = 0.0;
    for d in docs {
        let tr = encode_eval(d, params)?;
        let lp = decode(&tr.theta, params, 1.0)?;
        total += recon_loss(d, &lp) + kl_term(&tr.mu, &tr.logvar, prior)?;
        tokens += d.len() as f64;
    }
    Ok((total / tokens).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub id: usize,
    pub words: Vec<String>,
    pub npmi: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub external_npmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub topics: Vec<TopicEntry>,
    pub mean_npmi: f64,
    pub redundant_pairs: Option<usize>,
    pub perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub external_npmi: Option<f64>,
}

/// Scores a model's top-10 topics against a held-out split.
pub fn topic_report(
    params: &ModelParams,
    vocab: &Vocabulary,
    docs: &[BowDocument],
    prior: &PriorLN,
    external: Option<&CooccurrenceCounts>,
) -> Result<TopicReport, EvalError> {
    let n = DEFAULT_TOP_N.min(params.hyper.vocab_size);
    let topics = top_words(params, n)?;
    let presence: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.entries().iter().map(|&(w, _)| w).collect())
        .collect();
    let counts = count_cooccurrence(&presence, &topic_universe(&topics));
    let mut entries = Vec::with_capacity(topics.len());
    for t in &topics {
        entries.push(TopicEntry {
            id: t.topic_id,
            words: t
                .word_ids()
                .iter()
                .map(|&w| vocab.token(w).unwrap_or("<unk>").to_string())
                .collect(),
            npmi: npmi_topic(t, &counts)?,
            external_npmi: external.map(|c| npmi_topic(t, c)).transpose()?,
        });
    }
    let mean_npmi = entries.iter().map(|e| e.npmi).sum::<f64>() / entries.len() as f64;
    let redundant_pairs = (n == REDUNDANCY_TOP_N)
        .then(|| redundancy_pairs(&topics))
        .transpose()?;
    let external_npmi = external.map(|c| npmi_model(&topics, c)).transpose()?;
    Ok(TopicReport {
        topics: entries,
        mean_npmi,
        redundant_pairs,
        perplexity: perplexity(docs, params, prior)?,
        external_npmi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ntm::{prior_from_alpha, ModelHyper};
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn list(id: usize, words: &[usize]) -> TopicWordList {
        TopicWordList {
            topic_id: id,
            words: words.iter().map(|&w| (w, 0.0)).collect(),
        }
    }

    fn abcd_presence() -> Vec<Vec<usize>> {
        // a=0 b=1 c=2 d=3 over docs {a,b},{a,b},{a,c},{d}
        vec![vec![0, 1], vec![0, 1], vec![0, 2], vec![3]]
    }

    #[test]
    fn top_words_argsort_and_ties() {
        let t = top_words_of_row(0, &[0.1, 0.9, 0.5], 2);
        assert_eq!(t.word_ids(), vec![1, 2]);
        let t = top_words_of_row(0, &[0.5, 0.2, 0.5, 0.7], 3);
        assert_eq!(t.word_ids(), vec![3, 0, 2]);
    }

    #[test]
    fn top_words_ignore_background() {
        let hyper = ModelHyper {
            topics: 3,
            vocab_size: 12,
            hidden_dim: 2,
            alpha: 1.0,
            dropout: 0.0,
        };
        let mut rng = SeededRng::new(4);
        let flat = ModelParams::init(hyper, vec![-(12f64).ln(); 12], &mut rng).unwrap();
        let bg: Vec<f64> = (0..12).map(|i| -3.0 + 0.4 * i as f64).collect();
        let mut skewed = ModelParams::zeros(hyper, bg).unwrap();
        skewed.beta = flat.beta.clone();
        assert_eq!(top_words(&flat, 5).unwrap(), top_words(&skewed, 5).unwrap());
        assert!(matches!(top_words(&flat, 13), Err(EvalError::TooManyWords { .. })));
    }

    #[test]
    fn cooccurrence_worked_example() {
        let c = count_cooccurrence(&abcd_presence(), &[0, 1, 2, 3, 4]);
        assert_eq!((c.df(0), c.df(1), c.joint(0, 1), c.joint(1, 0)), (3, 2, 2, 2));
        assert_eq!(c.df(4), 0);
        assert_eq!(c.joint(2, 3), 0);
    }

    #[test]
    fn npmi_worked_example() {
        let c = count_cooccurrence(&abcd_presence(), &[0, 1, 2, 3]);
        let expect = (4.0f64 / 3.0).ln() / 2f64.ln();
        assert!((npmi_pair(&c, 0, 1) - expect).abs() < 1e-15);
        assert!((expect - 0.4150).abs() < 5e-5);
        assert_eq!(npmi_pair(&c, 1, 3), -1.0);
    }

    #[test]
    fn npmi_perfect_association() {
        let presence = vec![vec![0, 1], vec![0, 1], vec![2], vec![2]];
        let c = count_cooccurrence(&presence, &[0, 1, 2]);
        assert!((npmi_pair(&c, 0, 1) - 1.0).abs() < 1e-15);
        let all = vec![vec![0, 1]; 3];
        let c = count_cooccurrence(&all, &[0, 1]);
        assert_eq!(npmi_pair(&c, 0, 1), 1.0);
    }

    #[test]
    fn npmi_topic_and_model() {
        let c = count_cooccurrence(&abcd_presence(), &[0, 1, 2, 3]);
        assert!(npmi_topic(&list(0, &[0]), &c).is_err());
        let x = npmi_topic(&list(0, &[0, 1, 2]), &c).unwrap();
        let y = npmi_topic(&list(1, &[1, 3]), &c).unwrap();
        assert_eq!(npmi_model(&[list(0, &[0, 1, 2])], &c).unwrap(), x);
        let both = npmi_model(&[list(0, &[0, 1, 2]), list(1, &[1, 3])], &c).unwrap();
        assert!((both - (x + y) / 2.0).abs() < 1e-15);
        let swapped = npmi_model(&[list(1, &[1, 3]), list(0, &[0, 1, 2])], &c).unwrap();
        assert!((both - swapped).abs() < 1e-15);
        assert!(matches!(npmi_model(&[], &c), Err(EvalError::NoTopics)));
    }

    #[test]
    fn external_counts_parse() {
        let vocab = Vocabulary::parse("a\nb\nc\n").unwrap();
        let text = r#"{"doc_count": 100, "df": {"a": 50, "b": 20, "zzz": 7}, "joint": [["a","b",10], ["a","zzz",3]]}"#;
        let c = external_counts_from_str(text, &vocab).unwrap();
        assert_eq!(c.doc_count, 100);
        assert_eq!(c.df(0), 50);
        assert_eq!(c.joint(1, 0), 10);
        assert_eq!(c.joint(0, 2), 0);
        assert!(external_counts_from_str("{\"df\": 3}", &vocab).is_err());
    }

    #[test]
    fn redundancy_counts() {
        let base: Vec<usize> = (0..10).collect();
        let mut rev = base.clone();
        rev.reverse();
        let other: Vec<usize> = (5..15).collect();
        assert_eq!(redundancy_pairs(&[list(0, &base), list(1, &other)]).unwrap(), 0);
        assert_eq!(redundancy_pairs(&[list(0, &base), list(1, &rev)]).unwrap(), 1);
        let three = [list(0, &base), list(1, &rev), list(2, &base), list(3, &other)];
        assert_eq!(redundancy_pairs(&three).unwrap(), 3);
        assert!(redundancy_pairs(&[list(0, &[1, 2, 3])]).is_err());
        assert!(!fails_redundancy_filter(1));
        assert!(fails_redundancy_filter(3));
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let hyper = ModelHyper {
            topics: 4,
            vocab_size: 9,
            hidden_dim: 3,
            alpha: 1.0,
            dropout: 0.0,
        };
        let prior = prior_from_alpha(1.0, 4).unwrap();
        let mut p = ModelParams::zeros(hyper, vec![-(9f64).ln(); 9]).unwrap();
        p.logvar_bias.row_mut(0).iter_mut().for_each(|b| *b = prior.var[0].ln());
        let docs = vec![
            BowDocument::new("a", vec![(0, 3), (8, 1)]).unwrap(),
            BowDocument::new("b", vec![(4, 2)]).unwrap(),
        ];
        let ppl = perplexity(&docs, &p, &prior).unwrap();
        assert!((ppl - 9.0).abs() < 1e-9);

        let mut doubled = docs.clone();
        doubled.extend(docs.iter().cloned());
        let mut rng = SeededRng::new(3);
        let trained = ModelParams::init(hyper, vec![-(9f64).ln(); 9], &mut rng).unwrap();
        let a = perplexity(&docs, &trained, &prior).unwrap();
        let b = perplexity(&doubled, &trained, &prior).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
        assert!(perplexity(&[], &p, &prior).is_err());
    }

    fn brute_npmi(presence: &[Vec<usize>], a: usize, b: usize) -> f64 {
        let n = presence.len() as f64;
        let has = |d: &Vec<usize>, w| d.contains(&w);
        let ca = presence.iter().filter(|d| has(d, a)).count() as f64;
        let cb = presence.iter().filter(|d| has(d, b)).count() as f64;
        let cab = presence.iter().filter(|d| has(d, a) && has(d, b)).count() as f64;
        if cab == 0.0 {
            return -1.0;
        }
        if cab == n {
            return 1.0;
        }
        let pmi = (cab * n / (ca * cb)).ln();
        pmi / (n / cab).ln()
    }

    proptest! {
        #[test]
        fn npmi_bounded_and_order_free(
            docs in prop::collection::vec(prop::collection::btree_set(0usize..15, 0..8), 1..30),
            words in prop::collection::btree_set(0usize..15, 2..8),
        ) {
            let presence: Vec<Vec<usize>> = docs.into_iter().map(|s| s.into_iter().collect()).collect();
            let words: Vec<usize> = words.into_iter().collect();
            let c = count_cooccurrence(&presence, &words);
            for i in 0..words.len() {
                for j in i + 1..words.len() {
                    let x = npmi_pair(&c, words[i], words[j]);
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
                    prop_assert!((x - brute_npmi(&presence, words[i], words[j])).abs() < 1e-12);
                    let j_ = c.joint(words[i], words[j]);
                    prop_assert!(j_ <= c.df(words[i]).min(c.df(words[j])));
                }
            }
            let fwd = npmi_topic(&list(0, &words), &c).unwrap();
            let mut rev = words.clone();
            rev.reverse();
            let back = npmi_topic(&list(0, &rev), &c).unwrap();
            prop_assert!((fwd - back).abs() < 1e-12);
        }
    }
}

//! Seeded synthetic bag-of-words corpora with planted topics.
//!
//! Each latent topic puts Zipf-shaped mass on its own random subset of the
//! vocabulary; documents mix a few topics (Dirichlet proportions) with a
//! corpus-wide Zipf background. Words that never occur in the train split are
//! pruned and ids are compacted, as a real preprocessing pipeline would.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BowCorpus, BowDocument, CorpusError, Vocabulary};
use crate::numerics::SeededRng;

type RawDoc = Vec<(usize, u32)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub mean_doc_len: f64,
    /// Fraction of tokens drawn from the background distribution.
    pub background_mass: f64,
    /// Symmetric Dirichlet concentration of per-document topic proportions.
    pub doc_alpha: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            topics: 20,
            words_per_topic: 120,
            train_docs: 2000,
            dev_docs: 500,
            test_docs: 1670,
            mean_doc_len: 87.0,
            background_mass: 0.35,
            doc_alpha: 0.1,
            seed: 20,
        }
    }
}

/// Planted structure, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct PlantedTopics {
    /// Word ids (after pruning) of each topic, most probable first.
    pub topic_words: Vec<Vec<usize>>,
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r as f64 + 1.0)).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<(BowCorpus, PlantedTopics), CorpusError> {
    assert!(spec.vocab_size > 0 && spec.topics > 0, "empty synthetic spec");
    assert!(spec.words_per_topic <= spec.vocab_size, "words_per_topic exceeds vocab_size");
    let mut rng = SeededRng::new(spec.seed);
    let v = spec.vocab_size;

    let topic_words: Vec<Vec<usize>> = (0..spec.topics)
        .map(|_| index::sample(rng.rng_mut(), v, spec.words_per_topic).into_vec())
        .collect();
    let topic_dist = WeightedIndex::new(zipf_weights(spec.words_per_topic)).expect("positive weights");
    let mut bg_order: Vec<usize> = (0..v).collect();
    rng.shuffle(&mut bg_order);
    let bg_dist = WeightedIndex::new(zipf_weights(v)).expect("positive weights");
    let gamma = Gamma::new(spec.doc_alpha, 1.0).expect("doc_alpha > 0");

    let mut raw: Vec<(&str, Vec<RawDoc>)> = Vec::new();
    for (name, n) in [("train", spec.train_docs), ("dev", spec.dev_docs), ("test", spec.test_docs)] {
        let mut docs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(rng.rng_mut());
            let len = (spec.mean_doc_len * (0.5 * z - 0.125).exp()).round().max(5.0) as usize;
            let mut props: Vec<f64> = (0..spec.topics).map(|_| gamma.sample(rng.rng_mut())).collect();
            if props.iter().sum::<f64>() <= 0.0 {
                props[rng.below(spec.topics)] = 1.0;
            }
            let mix = WeightedIndex::new(&props).expect("non-zero proportions");
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                let w = if rng.uniform() < spec.background_mass {
                    bg_order[bg_dist.sample(rng.rng_mut())]
                } else {
                    let k = mix.sample(rng.rng_mut());
                    topic_words[k][topic_dist.sample(rng.rng_mut())]
                };
                tokens.push((w, 1));
            }
            docs.push(tokens);
        }
        raw.push((name, docs));
    }

    let mut seen = vec![false; v];
    for (w, _) in raw[0].1.iter().flatten() {
        seen[*w] = true;
    }
    let mut remap = vec![usize::MAX; v];
    let mut tokens = Vec::new();
    for w in 0..v {
        if seen[w] {
            remap[w] = tokens.len();
            tokens.push(format!("w{w:04}"));
        }
    }

    let mut splits = BTreeMap::new();
    for (name, docs) in raw {
        let docs: Vec<BowDocument> = docs
            .into_iter()
            .enumerate()
            .filter_map(|(i, toks)| {
                let entries = toks
                    .into_iter()
                    .filter(|(w, _)| remap[*w] != usize::MAX)
                    .map(|(w, c)| (remap[w], c))
                    .collect();
                BowDocument::new(format!("{name}-{i:05}"), entries)
            })
            .collect();
        splits.insert(name.to_string(), docs);
    }
    let planted = PlantedTopics {
        topic_words: topic_words
            .iter()
            .map(|ws| ws.iter().filter(|&&w| remap[w] != usize::MAX).map(|&w| remap[w]).collect())
            .collect(),
    };
    Ok((BowCorpus::new(Vocabulary::new(tokens)?, splits)?, planted))
}

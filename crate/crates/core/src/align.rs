//! Topic-by-topic comparison of two models: Jensen-Shannon divergence,
//! competitive linking, head-to-head NPMI wins and stratified pair sampling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ntm::ModelParams;
use crate::numerics::{softmax, Matrix, NumericError, SeededRng};

/// Tolerance on `Σ p = 1` accepted by [`js_divergence`].
pub const SIMPLEX_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error("distribution lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot align an empty model")]
    EmptyModel,
    #[error("need at least {needed} aligned pairs, have {have}")]
    TooFewPairs { needed: usize, have: usize },
    #[error("brackets must be >= 1")]
    NoBrackets,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Full word distribution of every topic, `softmax(m + B_k)`.
pub fn topic_distributions(params: &ModelParams) -> Result<Vec<Vec<f64>>, AlignError> {
    (0..params.hyper.topics)
        .map(|k| {
            let logits: Vec<f64> = params
                .beta
                .row(k)
                .iter()
                .zip(params.background())
                .map(|(b, m)| b + m)
                .collect();
            Ok(softmax(&logits)?)
        })
        .collect()
}

fn check_simplex(p: &[f64]) -> Result<(), AlignError> {
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(AlignError::NotSimplex(format!("entry {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(AlignError::NotSimplex(format!("sums to {sum}")));
    }
    Ok(())
}

/// Natural-log Jensen-Shannon divergence, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, AlignError> {
    if p.len() != q.len() {
        return Err(AlignError::LengthMismatch(p.len(), q.len()));
    }
    check_simplex(p)?;
    check_simplex(q)?;
    let mut sum = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let mid = 0.5 * (a + b);
        let term = |x: f64| if x > 0.0 { x * (x / mid).ln() } else { 0.0 };
        // a single commutative add keeps the result bitwise symmetric
        sum += term(a) + term(b);
    }
    Ok((0.5 * sum).clamp(0.0, std::f64::consts::LN_2))
}

/// `jsd[i][j] = JSD(a_i, b_j)`.
pub fn jsd_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Matrix, AlignError> {
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            m.set(i, j, js_divergence(p, q)?);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    pub jsd: f64,
}

/// Greedy matching: repeatedly take the lowest-divergence pair among
/// unmatched topics. Ties go to the lexicographically smallest `(a, b)`.
/// Produces `min(rows, cols)` links in selection order.
pub fn competitive_link(jsd: &Matrix) -> Result<Vec<Link>, AlignError> {
    let (rows, cols) = jsd.shape();
    if rows == 0 || cols == 0 {
        return Err(AlignError::EmptyModel);
    }
    let mut cells: Vec<Link> = (0..rows)
        .flat_map(|a| (0..cols).map(move |b| (a, b)))
        .map(|(a, b)| Link { a, b, jsd: jsd.get(a, b) })
        .collect();
    cells.sort_by(|x, y| x.jsd.total_cmp(&y.jsd).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    let mut used_a = vec![false; rows];
    let mut used_b = vec![false; cols];
    let mut links = Vec::with_capacity(rows.min(cols));
    for c in cells {
        if !used_a[c.a] && !used_b[c.b] {
            used_a[c.a] = true;
            used_b[c.b] = true;
            links.push(c);
            if links.len() == rows.min(cols) {
                break;
            }
        }
    }
    Ok(links)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    #[serde(rename = "a")]
    pub topic_a: usize,
    #[serde(rename = "b")]
    pub topic_b: usize,
    pub jsd: f64,
    pub npmi_a: f64,
    pub npmi_b: f64,
}

/// Aligns two models' topic distributions and attaches per-topic NPMI.
pub fn align_topics(
    dists_a: &[Vec<f64>],
    dists_b: &[Vec<f64>],
    npmi_a: &[f64],
    npmi_b: &[f64],
) -> Result<Vec<AlignedPair>, AlignError> {
    let links = competitive_link(&jsd_matrix(dists_a, dists_b)?)?;
    Ok(links
        .into_iter()
        .map(|l| AlignedPair {
            topic_a: l.a,
            topic_b: l.b,
            jsd: l.jsd,
            npmi_a: npmi_a[l.a],
            npmi_b: npmi_b[l.b],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Wins {
    pub a: usize,
    pub b: usize,
    pub ties: usize,
}

/// Counts which side has the strictly higher NPMI over the first
/// `threshold` pairs (pairs must already be in ascending JSD order).
pub fn head_to_head(pairs: &[AlignedPair], threshold: usize) -> Result<Wins, AlignError> {
    if threshold > pairs.len() {
        return Err(AlignError::TooFewPairs {
            needed: threshold,
            have: pairs.len(),
        });
    }
    let mut w = Wins::default();
    for p in &pairs[..threshold] {
        if p.npmi_a > p.npmi_b {
            w.a += 1;
        } else if p.npmi_b > p.npmi_a {
            w.b += 1;
        } else {
            w.ties += 1;
        }
    }
    Ok(w)
}

/// Splits the JSD-sorted pairs into `brackets` contiguous blocks (the last
/// takes the remainder) and draws `per_bracket` pairs from each without
/// replacement. The result is sorted by JSD.
pub fn bracket_sample(
    pairs: &[AlignedPair],
    brackets: usize,
    per_bracket: usize,
    rng: &mut SeededRng,
) -> Result<Vec<AlignedPair>, AlignError> {
    if brackets == 0 {
        return Err(AlignError::NoBrackets);
    }
    let needed = brackets * per_bracket;
    if pairs.len() < needed {
        return Err(AlignError::TooFewPairs {
            needed,
            have: pairs.len(),
        });
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|x, y| x.jsd.total_cmp(&y.jsd));
    let block = sorted.len() / brackets;
    let mut out = Vec::with_capacity(needed);
    for k in 0..brackets {
        let start = k * block;
        let end = if k + 1 == brackets { sorted.len() } else { start + block };
        let chosen = rand::seq::index::sample(rng.rng_mut(), end - start, per_bracket);
        out.extend(chosen.iter().map(|i| sorted[start + i]));
    }
    out.sort_by(|x, y| x.jsd.total_cmp(&y.jsd));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pairs: Vec<AlignedPair>,
    pub wins: Wins,
    pub threshold: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampled: Option<Vec<AlignedPair>>,
}

/// Plain-text table: one block per pair with both topics' NPMI and words.
pub fn render_table(pairs: &[AlignedPair], words_a: &[Vec<String>], words_b: &[Vec<String>], label_a: &str, label_b: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:<70}  {:>8}", "rank", "topic pair", "JSD");
    for (rank, p) in pairs.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {label_a}: ({:.4}, '{}')",
            rank + 1,
            p.npmi_a,
            words_a[p.topic_a].join(" ")
        );
        let _ = writeln!(
            out,
            "{:>4}  {label_b}: ({:.4}, '{}')  {:>8.4}",
            "",
            p.npmi_b,
            words_b[p.topic_b].join(" "),
            p.jsd
        );
    }
    out
}

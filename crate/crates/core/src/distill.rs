//! Teacher distillation: teacher-logit files, temperature softening with
//! top-`c·N_d` clipping, and the interpolated reconstruction loss
//!
//! ```text
//! loss = λ·T²·(−w_teacherᵀ · log softmax(η/T)) + (1−λ)·(−countsᵀ · log softmax(η))
//! ```
//!
//! where `η = m + θᵀB` are the topic model's decoder logits and `w_teacher`
//! is the softened teacher distribution scaled to the document length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowCorpus, BowDocument, CorpusError};
use crate::ntm::{recon_loss, ModelParams};
use crate::numerics::{log_softmax, softmax, NumericError};

pub const TEACHER_MAGIC: &[u8; 4] = b"BATL";
pub const TEACHER_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

/// Added inside the log of the surrogate teacher so unobserved words stay finite.
pub const SURROGATE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"BATL\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported teacher file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("document count mismatch: file has D={found}, corpus split has D={expected}")]
    DocCountMismatch { expected: usize, found: usize },
    #[error("vocabulary size mismatch: file has V={found}, expected V={expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("truncated teacher file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite teacher logit at row {row}, column {col}")]
    NonFiniteLogit { row: usize, col: usize },
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    /// Weight on the teacher term.
    pub lambda: f64,
    pub temperature: f64,
    /// Keep the top `c·N_d` teacher probabilities; 0 disables clipping.
    pub clip: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            temperature: 2.0,
            clip: 0.0,
        }
    }
}

impl KdConfig {
    pub fn disabled() -> Self {
        Self {
            lambda: 0.0,
            temperature: 1.0,
            clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.temperature >= 1.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be >= 1, got {}", self.temperature));
        }
        if !(self.clip >= 0.0 && self.clip.is_finite()) {
            return bad(format!("clip must be >= 0, got {}", self.clip));
        }
        Ok(())
    }

    /// Number of teacher probabilities kept for a document of length `n_d`.
    pub fn keep_count(&self, n_d: u64, vocab_size: usize) -> usize {
        if self.clip == 0.0 {
            vocab_size
        } else {
            ((self.clip * n_d as f64).round() as usize).max(1).min(vocab_size)
        }
    }
}

/// Row-major `D×V` teacher logits, stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    docs: usize,
    vocab_size: usize,
    data: Vec<f32>,
}

impl TeacherLogits {
    pub fn new(docs: usize, vocab_size: usize, data: Vec<f32>) -> Result<Self, DistillError> {
        if data.len() != docs * vocab_size {
            return Err(DistillError::Truncated {
                expected: docs * vocab_size * 4,
                actual: data.len() * 4,
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(DistillError::NonFiniteLogit {
                row: i / vocab_size,
                col: i % vocab_size,
            });
        }
        Ok(Self {
            docs,
            vocab_size,
            data,
        })
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, d: usize) -> &[f32] {
        &self.data[d * self.vocab_size..(d + 1) * self.vocab_size]
    }

    pub fn row_f64(&self, d: usize) -> Vec<f64> {
        self.row(d).iter().map(|&x| x as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(TEACHER_MAGIC);
        out.extend_from_slice(&TEACHER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.docs as u64).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        out.push(DTYPE_F32);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Parses a teacher file, checking the header against the expected shape.
    pub fn from_bytes(bytes: &[u8], expected_docs: usize, expected_vocab: usize) -> Result<Self, DistillError> {
        if bytes.len() < HEADER_LEN {
            return Err(DistillError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != TEACHER_MAGIC {
            return Err(DistillError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TEACHER_VERSION {
            return Err(DistillError::UnsupportedVersion(version));
        }
        let docs = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let vocab = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let dtype = bytes[24];
        if dtype != DTYPE_F32 {
            return Err(DistillError::UnsupportedDtype(dtype));
        }
        if vocab != expected_vocab {
            return Err(DistillError::VocabMismatch {
                expected: expected_vocab,
                found: vocab,
            });
        }
        if docs != expected_docs {
            return Err(DistillError::DocCountMismatch {
                expected: expected_docs,
                found: docs,
            });
        }
        let expected = docs
            .checked_mul(vocab)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or(DistillError::Truncated {
                expected: usize::MAX,
                actual: bytes.len(),
            })?;
        if bytes.len() != expected {
            return Err(DistillError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(docs, vocab, data)
    }

    pub fn write(&self, path: &Path) -> Result<(), DistillError> {
        fs::write(path, self.to_bytes()).map_err(|source| DistillError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_teacher_logits(
    path: &Path,
    expected_docs: usize,
    expected_vocab: usize,
) -> Result<TeacherLogits, DistillError> {
    let bytes = fs::read(path).map_err(|source| DistillError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TeacherLogits::from_bytes(&bytes, expected_docs, expected_vocab)
}

/// Teacher word distribution scaled to the document length.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDocument {
    pub weights: Vec<f64>,
    pub support: usize,
}

impl PseudoDocument {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `softmax(z/T)`, optionally restricted to its `max(1, round(c·N_d))` largest
/// entries and renormalized, then scaled by `N_d`. Ties at the cut go to the
/// lower word id.
pub fn soften_and_clip(z: &[f64], n_d: u64, cfg: &KdConfig) -> Result<PseudoDocument, DistillError> {
    if n_d == 0 {
        return Err(DistillError::InvalidConfig("document length must be >= 1".into()));
    }
    let scaled: Vec<f64> = z.iter().map(|x| x / cfg.temperature).collect();
    let mut probs = softmax(&scaled)?;
    let v = probs.len();
    let keep = cfg.keep_count(n_d, v);
    if keep < v {
        let mut order: Vec<usize> = (0..v).collect();
        order.select_nth_unstable_by(keep - 1, |&a, &b| {
            probs[b].total_cmp(&probs[a]).then(a.cmp(&b))
        });
        let mut kept = vec![false; v];
        order[..keep].iter().for_each(|&i| kept[i] = true);
        let mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
        for (p, k) in probs.iter_mut().zip(&kept) {
            *p = if *k { *p / mass } else { 0.0 };
        }
    }
    let n = n_d as f64;
    let weights: Vec<f64> = probs.iter().map(|p| p * n).collect();
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    Ok(PseudoDocument { weights, support })
}

/// Builds pseudo-documents for every document of a split, in file order.
pub fn pseudo_documents(
    teacher: &TeacherLogits,
    docs: &[BowDocument],
    cfg: &KdConfig,
) -> Result<Vec<PseudoDocument>, DistillError> {
    if teacher.docs() != docs.len() {
        return Err(DistillError::DocCountMismatch {
            expected: docs.len(),
            found: teacher.docs(),
        });
    }
    docs.iter()
        .enumerate()
        .map(|(i, d)| soften_and_clip(&teacher.row_f64(i), d.len(), cfg))
        .collect()
}

/// Loss value and its gradient with respect to the decoder logits `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
}

/// Interpolated reconstruction loss for one document.
///
/// With `pseudo = None` or `λ = 0` the teacher term is skipped and the result
/// is the plain reconstruction loss.
pub fn kd_loss(
    doc: &BowDocument,
    pseudo: Option<&PseudoDocument>,
    theta: &[f64],
    params: &ModelParams,
    cfg: &KdConfig,
) -> Result<KdLoss, DistillError> {
    let v = params.hyper.vocab_size;
    let eta = params.decoder_logits(theta);
    let log_p = log_softmax(&eta)?;
    let n = doc.len() as f64;

    let recon = recon_loss(doc, &log_p);
    let mut grad: Vec<f64> = log_p.iter().map(|lp| lp.exp() * n).collect();
    for &(w, c) in doc.entries() {
        grad[w] -= c as f64;
    }

    let lambda = if pseudo.is_some() { cfg.lambda } else { 0.0 };
    if lambda == 0.0 {
        return Ok(KdLoss {
            loss: recon,
            grad_logits: grad,
        });
    }
    let pseudo = pseudo.expect("checked above");
    if pseudo.weights.len() != v {
        return Err(DistillError::VocabMismatch {
            expected: v,
            found: pseudo.weights.len(),
        });
    }

    let t = cfg.temperature;
    let log_q = log_softmax(&eta.iter().map(|x| x / t).collect::<Vec<_>>())?;
    let total = pseudo.total();
    let mut ce = 0.0;
    for (w, lq) in pseudo.weights.iter().zip(&log_q) {
        if *w > 0.0 {
            ce -= w * lq;
        }
    }
    let loss = lambda * t * t * ce + (1.0 - lambda) * recon;
    // d/dη of λT²·CE(w, softmax(η/T)) = λT·(softmax(η/T)·Σw − w)
    for ((g, lq), w) in grad.iter_mut().zip(&log_q).zip(&pseudo.weights) {
        *g = (1.0 - lambda) * *g + lambda * t * (lq.exp() * total - w);
    }
    Ok(KdLoss {
        loss,
        grad_logits: grad,
    })
}

/// Desk-scale stand-in teacher: `z_{d,v} = log(count_{d,v} + s·exp(m_v)·N_d + floor)`,
/// with `m` the train-split background log-frequencies.
pub fn surrogate_teacher(corpus: &BowCorpus, split: &str, smoothing: f64) -> Result<TeacherLogits, DistillError> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(DistillError::InvalidConfig(format!("smoothing must be >= 0, got {smoothing}")));
    }
    let docs = corpus.split(split)?;
    if docs.is_empty() {
        return Err(CorpusError::EmptySplit(split.to_string()).into());
    }
    let v = corpus.vocab_size();
    let background: Vec<f64> = if smoothing > 0.0 {
        let source = if corpus.has_split("train") { "train" } else { split };
        corpus
            .background_log_freq(source, 0.0)?
            .into_iter()
            .map(f64::exp)
            .collect()
    } else {
        vec![0.0; v]
    };
    let mut data = Vec::with_capacity(docs.len() * v);
    for d in docs {
        let n = d.len() as f64;
        let counts = d.dense_counts(v);
        for (c, b) in counts.iter().zip(&background) {
            data.push((c + smoothing * b * n + SURROGATE_FLOOR).ln() as f32);
        }
    }
    TeacherLogits::new(docs.len(), v, data)
}

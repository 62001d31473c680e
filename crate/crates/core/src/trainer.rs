//! Minibatch training with KL annealing, seeded restarts and run directories.
//!
//! Randomness for a run comes from one [`SeededRng`] consumed in a fixed
//! order: parameter initialization, then per epoch a shuffle of the training
//! documents, then per batch one [`Noise`] draw per document in batch order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{BowCorpus, BowDocument, CorpusError};
use crate::distill::{kd_loss, pseudo_documents, DistillError, KdConfig, PseudoDocument, TeacherLogits};
use crate::evalmetrics::{count_cooccurrence, npmi_model, top_words, topic_universe, EvalError, DEFAULT_TOP_N};
use crate::ntm::{
    backward, encode_with_noise, kl_term, prior_from_alpha, Gradients, ModelError, ModelHyper, ModelParams, Noise,
    PriorLN,
};
use crate::numerics::{AdamConfig, AdamState, NumericError, SeededRng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("lambda = {0} needs teacher logits")]
    MissingTeacher(f64),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

impl TrainError {
    /// Whether the failure is a numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFiniteLoss { .. } | TrainError::Numeric(_) => true,
            TrainError::Model(ModelError::Numeric(_)) | TrainError::Distill(DistillError::Numeric(_)) => true,
            TrainError::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub topics: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub kd: KdConfig,
    /// Fraction of all steps over which the KL weight ramps from 0 to 1.
    pub anneal: f64,
    pub seed: u64,
    pub restarts: usize,
    pub bg_smoothing: f64,
    pub train_split: String,
    pub dev_split: String,
    pub corpus_dir: Option<PathBuf>,
    pub teacher_logits: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 200,
            learning_rate: 0.002,
            alpha: 1.0,
            topics: 50,
            hidden_dim: 300,
            dropout: 0.0,
            kd: KdConfig::default(),
            anneal: 0.25,
            seed: 1,
            restarts: 5,
            bg_smoothing: 0.0,
            train_split: "train".into(),
            dev_split: "dev".into(),
            corpus_dir: None,
            teacher_logits: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return bad(format!("anneal must lie in (0, 1], got {}", self.anneal));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        if self.bg_smoothing.is_nan() || self.bg_smoothing < 0.0 {
            return bad("bg_smoothing must be >= 0".into());
        }
        self.kd.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn hyper(&self, vocab_size: usize) -> ModelHyper {
        ModelHyper {
            topics: self.topics,
            vocab_size,
            hidden_dim: self.hidden_dim,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }

    pub fn uses_teacher(&self) -> bool {
        self.kd.lambda > 0.0
    }
}

/// Linear KL warm-up: `min(1, step / (anneal · total_steps))`.
pub fn kl_weight(step: usize, total_steps: usize, anneal: f64) -> Result<f64, TrainError> {
    if anneal.is_nan() || anneal <= 0.0 {
        return Err(TrainError::Config(format!("anneal must be positive, got {anneal}")));
    }
    let ramp = anneal * total_steps as f64;
    if ramp <= 0.0 {
        return Ok(1.0);
    }
    Ok((step as f64 / ramp).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub kl_weight: f64,
    pub dev_npmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn final_dev_npmi(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.dev_npmi)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Mean loss and gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub grads: Gradients,
}

/// Forward pass, loss and hand-derived gradients for one minibatch with
/// fixed per-document noise. `pseudo` supplies one teacher pseudo-document
/// per batch document when distillation is active.
pub fn evaluate_batch(
    params: &ModelParams,
    prior: &PriorLN,
    batch: &[&BowDocument],
    pseudo: Option<&[&PseudoDocument]>,
    noises: &[Noise],
    kd: &KdConfig,
    kl_weight: f64,
) -> Result<BatchEval, TrainError> {
    if noises.len() != batch.len() || pseudo.is_some_and(|p| p.len() != batch.len()) {
        return Err(TrainError::Config("batch, noise and teacher rows differ in length".into()));
    }
    let mut traces = Vec::with_capacity(batch.len());
    let mut grad_logits = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for (i, (doc, noise)) in batch.iter().zip(noises).enumerate() {
        let trace = encode_with_noise(doc, params, noise)?;
        let kd_out = kd_loss(doc, pseudo.map(|p| p[i]), &trace.theta, params, kd)?;
        let kl = kl_term(&trace.mu, &trace.logvar, prior)?;
        total += kd_out.loss + kl_weight * kl;
        grad_logits.push(kd_out.grad_logits);
        traces.push(trace);
    }
    let grads = backward(batch, &traces, &grad_logits, kl_weight, prior, params)?;
    Ok(BatchEval {
        loss: total / batch.len() as f64,
        grads,
    })
}

/// Dev-split co-occurrence source for per-epoch NPMI.
struct DevScorer {
    presence: Vec<Vec<usize>>,
}

impl DevScorer {
    fn score(&self, params: &ModelParams) -> Result<f64, EvalError> {
        let topics = top_words(params, DEFAULT_TOP_N.min(params.hyper.vocab_size))?;
        let counts = count_cooccurrence(&self.presence, &topic_universe(&topics));
        npmi_model(&topics, &counts)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: ModelParams,
}

/// Trains one model for `cfg.epochs` epochs with seed `cfg.seed`.
pub fn train(corpus: &BowCorpus, teacher: Option<&TeacherLogits>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_observer(corpus, teacher, cfg, |_| {})
}

/// Like [`train`], calling `observer` after each epoch.
pub fn train_with_observer(
    corpus: &BowCorpus,
    teacher: Option<&TeacherLogits>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let docs = corpus.split(&cfg.train_split)?;
    if docs.is_empty() {
        return Err(CorpusError::EmptySplit(cfg.train_split.clone()).into());
    }
    let pseudo: Option<Vec<PseudoDocument>> = if cfg.uses_teacher() {
        let teacher = teacher.ok_or(TrainError::MissingTeacher(cfg.kd.lambda))?;
        if teacher.vocab_size() != corpus.vocab_size() {
            return Err(DistillError::VocabMismatch {
                expected: corpus.vocab_size(),
                found: teacher.vocab_size(),
            }
            .into());
        }
        Some(pseudo_documents(teacher, docs, &cfg.kd)?)
    } else {
        None
    };
    let dev = corpus
        .has_split(&cfg.dev_split)
        .then(|| corpus.doc_term_presence(&cfg.dev_split))
        .transpose()?
        .filter(|p| !p.is_empty())
        .map(|presence| DevScorer { presence });

    let hyper = cfg.hyper(corpus.vocab_size());
    let prior = prior_from_alpha(cfg.alpha, cfg.topics)?;
    let background = corpus.background_log_freq(&cfg.train_split, cfg.bg_smoothing)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut params = ModelParams::init(hyper, background, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &params.shapes());

    let n_batches = docs.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut weight = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            weight = kl_weight(step, total_steps, cfg.anneal)?;
            let batch: Vec<&BowDocument> = chunk.iter().map(|&i| &docs[i]).collect();
            let rows: Option<Vec<&PseudoDocument>> = pseudo.as_ref().map(|p| chunk.iter().map(|&i| &p[i]).collect());
            let noises: Vec<Noise> = chunk.iter().map(|_| Noise::sample(&hyper, &mut rng)).collect();

            let wrap = |e: TrainError| TrainError::Step {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let eval =
                evaluate_batch(&params, &prior, &batch, rows.as_deref(), &noises, &cfg.kd, weight).map_err(wrap)?;
            if !eval.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            let mut tensors = params.tensors_mut();
            adam.step(&mut tensors, &eval.grads.as_refs())
                .map_err(|e| wrap(e.into()))?;
            loss_sum += eval.loss * batch.len() as f64;
            step += 1;
        }
        let dev_npmi = dev.as_ref().map(|d| d.score(&params)).transpose()?;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / docs.len() as f64,
            kl_weight: weight,
            dev_npmi,
        };
        log::debug!("seed {} epoch {epoch}: loss {:.4} dev_npmi {:?}", cfg.seed, m.loss, m.dev_npmi);
        observer(&m);
        epochs.push(m);
    }

    Ok(TrainOutcome {
        record: RunRecord {
            seed: cfg.seed,
            epochs,
            checkpoint: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        params,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.batm";
pub const AGGREGATE_FILE: &str = "aggregate.json";

pub fn run_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("run-{seed}"))
}

/// Trains and writes `run-<seed>/metrics.jsonl` and `run-<seed>/checkpoint.batm`.
pub fn train_to_dir(
    corpus: &BowCorpus,
    teacher: Option<&TeacherLogits>,
    cfg: &TrainConfig,
    output_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let dir = run_dir(output_dir, cfg.seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut outcome = train(corpus, teacher, cfg)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut out = Vec::new();
    for m in &outcome.record.epochs {
        serde_json::to_writer(&mut out, m).expect("metrics serialize");
        out.push(b'\n');
    }
    fs::File::create(&metrics_path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io_err(&metrics_path))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.params, &ckpt)?;
    outcome.record.checkpoint = Some(ckpt);
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_dev_npmi: f64,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub sd: f64,
    pub per_seed: Vec<SeedResult>,
}

/// Mean and sample standard deviation, computed in two passes.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug)]
pub struct RestartOutcome {
    pub aggregate: Aggregate,
    pub records: Vec<RunRecord>,
}

/// Runs `cfg.restarts` trainings with seeds `cfg.seed + 0..restarts` and
/// aggregates their final dev NPMI. With `output_dir`, each run writes its
/// run directory and `aggregate.json` is written at the top level.
pub fn run_restarts(
    corpus: &BowCorpus,
    teacher: Option<&TeacherLogits>,
    cfg: &TrainConfig,
    output_dir: Option<&Path>,
    parallel: bool,
) -> Result<RestartOutcome, TrainError> {
    cfg.validate()?;
    if !corpus.has_split(&cfg.dev_split) || corpus.split(&cfg.dev_split)?.is_empty() {
        return Err(TrainError::Config(format!(
            "restarts are scored on dev NPMI but split {:?} is missing or empty",
            cfg.dev_split
        )));
    }
    let configs: Vec<TrainConfig> = (0..cfg.restarts as u64)
        .map(|i| TrainConfig {
            seed: cfg.seed + i,
            ..cfg.clone()
        })
        .collect();
    let run_one = |c: &TrainConfig| match output_dir {
        Some(dir) => train_to_dir(corpus, teacher, c, dir),
        None => train(corpus, teacher, c),
    };
    let outcomes: Vec<Result<TrainOutcome, TrainError>> = if parallel && configs.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_one(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        configs.iter().map(run_one).collect()
    };
    let records: Vec<RunRecord> = outcomes
        .into_iter()
        .map(|o| o.map(|o| o.record))
        .collect::<Result<_, _>>()?;

    let per_seed: Vec<SeedResult> = records
        .iter()
        .map(|r| SeedResult {
            seed: r.seed,
            final_dev_npmi: r.final_dev_npmi().unwrap_or(f64::NAN),
            checkpoint: r.checkpoint.clone(),
            wall_clock_secs: r.wall_clock_secs,
        })
        .collect();
    let finals: Vec<f64> = per_seed.iter().map(|s| s.final_dev_npmi).collect();
    let (mean, sd) = mean_sd(&finals);
    let aggregate = Aggregate { mean, sd, per_seed };
    if let Some(dir) = output_dir {
        let path = dir.join(AGGREGATE_FILE);
        let json = serde_json::to_string_pretty(&aggregate).expect("aggregate serializes");
        fs::write(&path, json).map_err(io_err(&path))?;
    }
    Ok(RestartOutcome { aggregate, records })
}

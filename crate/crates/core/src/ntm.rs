//! Variational topic model with a logistic-normal posterior and a
//! background-plus-deviation decoder, `p(w | θ) = softmax(m + θᵀB)`.
//!
//! The backward pass is written out by hand. It starts from the gradient of a
//! document's reconstruction objective with respect to the decoder logits
//! `η = m + θᵀB` (supplied by the caller, see [`crate::distill::kd_loss`]) and
//! chains it back through the topic matrix, the softmax over topics, the
//! reparameterized draw and the encoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BowDocument;
use crate::numerics::{dot, log_softmax, sigmoid, softmax, softplus, Matrix, NumericError, SeededRng};

/// The log-variance head is clamped to this range before exponentiation.
pub const LOGVAR_CLAMP: f64 = 8.0;

pub const PARAM_NAMES: [&str; 7] = [
    "enc_embed",
    "enc_bias",
    "mu_weight",
    "mu_bias",
    "logvar_weight",
    "logvar_bias",
    "beta",
];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("vocabulary size mismatch: model has V={model}, input has V={input}")]
    VocabMismatch { model: usize, input: usize },
    #[error("backward pass needs one trace and one logit gradient per document ({docs} docs, {traces} traces, {grads} gradients)")]
    MissingTrace {
        docs: usize,
        traces: usize,
        grads: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub topics: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl ModelHyper {
    pub fn new(topics: usize, vocab_size: usize) -> Self {
        Self {
            topics,
            vocab_size,
            hidden_dim: 300,
            alpha: 1.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidHyper(m));
        if self.topics < 2 {
            return bad(format!("topic count must be >= 2, got {}", self.topics));
        }
        if self.vocab_size == 0 {
            return bad("vocabulary is empty".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Gaussian prior in the softmax basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorLN {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Laplace approximation of a symmetric `Dirichlet(α)` over `K` topics.
pub fn prior_from_alpha(alpha: f64, topics: usize) -> Result<PriorLN, ModelError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ModelError::InvalidHyper(format!("alpha must be positive, got {alpha}")));
    }
    if topics < 2 {
        return Err(ModelError::InvalidHyper(format!("topic count must be >= 2, got {topics}")));
    }
    let k = topics as f64;
    let var = (1.0 / alpha) * (1.0 - 2.0 / k) + 1.0 / (k * alpha);
    Ok(PriorLN {
        mean: vec![0.0; topics],
        var: vec![var; topics],
    })
}

/// Trainable tensors plus the frozen background log-frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    /// V×H, row `v` is the input embedding of word `v`.
    pub enc_embed: Matrix,
    pub enc_bias: Matrix,
    /// H×K
    pub mu_weight: Matrix,
    pub mu_bias: Matrix,
    /// H×K
    pub logvar_weight: Matrix,
    pub logvar_bias: Matrix,
    /// K×V topic deviations in log-frequency space.
    pub beta: Matrix,
    background: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(hyper: ModelHyper, background: Vec<f64>) -> Result<Self, ModelError> {
        hyper.validate()?;
        if background.len() != hyper.vocab_size {
            return Err(ModelError::VocabMismatch {
                model: hyper.vocab_size,
                input: background.len(),
            });
        }
        if background.iter().any(|x| !x.is_finite()) {
            return Err(NumericError::NonFinite("background log-frequencies".into()).into());
        }
        let (v, h, k) = (hyper.vocab_size, hyper.hidden_dim, hyper.topics);
        Ok(Self {
            hyper,
            enc_embed: Matrix::zeros(v, h),
            enc_bias: Matrix::zeros(1, h),
            mu_weight: Matrix::zeros(h, k),
            mu_bias: Matrix::zeros(1, k),
            logvar_weight: Matrix::zeros(h, k),
            logvar_bias: Matrix::zeros(1, k),
            beta: Matrix::zeros(k, v),
            background,
        })
    }

    /// Xavier-normal draws for `enc_embed`, `mu_weight` and `beta`, in that
    /// order; biases and the log-variance head start at zero.
    pub fn init(hyper: ModelHyper, background: Vec<f64>, rng: &mut SeededRng) -> Result<Self, ModelError> {
        let mut p = Self::zeros(hyper, background)?;
        let (v, h, k) = (hyper.vocab_size, hyper.hidden_dim, hyper.topics);
        let xavier = |a: usize, b: usize| (2.0 / (a + b) as f64).sqrt();
        p.enc_embed = Matrix::random_normal(v, h, xavier(v, h), rng);
        p.mu_weight = Matrix::random_normal(h, k, xavier(h, k), rng);
        p.beta = Matrix::random_normal(k, v, xavier(k, v), rng);
        Ok(p)
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 7] {
        [
            (PARAM_NAMES[0], &self.enc_embed),
            (PARAM_NAMES[1], &self.enc_bias),
            (PARAM_NAMES[2], &self.mu_weight),
            (PARAM_NAMES[3], &self.mu_bias),
            (PARAM_NAMES[4], &self.logvar_weight),
            (PARAM_NAMES[5], &self.logvar_bias),
            (PARAM_NAMES[6], &self.beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 7] {
        [
            (PARAM_NAMES[0], &mut self.enc_embed),
            (PARAM_NAMES[1], &mut self.enc_bias),
            (PARAM_NAMES[2], &mut self.mu_weight),
            (PARAM_NAMES[3], &mut self.mu_bias),
            (PARAM_NAMES[4], &mut self.logvar_weight),
            (PARAM_NAMES[5], &mut self.logvar_bias),
            (PARAM_NAMES[6], &mut self.beta),
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|(_, m)| m.shape()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Decoder logits `m + θᵀB`.
    pub fn decoder_logits(&self, theta: &[f64]) -> Vec<f64> {
        let mut eta = self.beta.vec_mul(theta);
        for (e, m) in eta.iter_mut().zip(&self.background) {
            *e += m;
        }
        eta
    }
}

/// Gradient buffers shaped like [`ModelParams`]' trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: [Matrix; 7],
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn as_refs(&self) -> [&Matrix; 7] {
        self.tensors.each_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Per-document randomness for a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub eps: Vec<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)) over hidden units.
    pub dropout_mask: Option<Vec<f64>>,
}

impl Noise {
    /// Draws `K` standard normals, then `H` uniforms for dropout when enabled.
    pub fn sample(hyper: &ModelHyper, rng: &mut SeededRng) -> Self {
        let eps = rng.standard_normal(hyper.topics);
        let dropout_mask = (hyper.dropout > 0.0).then(|| {
            let keep = 1.0 - hyper.dropout;
            (0..hyper.hidden_dim)
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        });
        Self { eps, dropout_mask }
    }

    pub fn zero(hyper: &ModelHyper) -> Self {
        Self {
            eps: vec![0.0; hyper.topics],
            dropout_mask: None,
        }
    }
}

/// Everything the backward pass needs from one document's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre_hidden: Vec<f64>,
    /// Post-activation, post-dropout hidden layer.
    pub hidden: Vec<f64>,
    pub dropout_mask: Option<Vec<f64>>,
    pub mu: Vec<f64>,
    /// Unclamped head output.
    pub logvar_raw: Vec<f64>,
    /// Clamped log-variance used downstream.
    pub logvar: Vec<f64>,
    pub eps: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Encodes a document; in training mode noise is drawn from `rng`, in eval
/// mode `ε = 0` and `θ = softmax(μ)`.
pub fn encode(
    doc: &BowDocument,
    params: &ModelParams,
    rng: &mut SeededRng,
    train_mode: bool,
) -> Result<ForwardTrace, ModelError> {
    if train_mode {
        let noise = Noise::sample(&params.hyper, rng);
        encode_with_noise(doc, params, &noise)
    } else {
        encode_eval(doc, params)
    }
}

pub fn encode_eval(doc: &BowDocument, params: &ModelParams) -> Result<ForwardTrace, ModelError> {
    encode_with_noise(doc, params, &Noise::zero(&params.hyper))
}

pub fn encode_with_noise(
    doc: &BowDocument,
    params: &ModelParams,
    noise: &Noise,
) -> Result<ForwardTrace, ModelError> {
    let hyper = &params.hyper;
    let mut pre_hidden = params.enc_bias.row(0).to_vec();
    for &(w, c) in doc.entries() {
        if w >= hyper.vocab_size {
            return Err(ModelError::VocabMismatch {
                model: hyper.vocab_size,
                input: w + 1,
            });
        }
        let c = c as f64;
        for (a, e) in pre_hidden.iter_mut().zip(params.enc_embed.row(w)) {
            *a += c * e;
        }
    }
    let mut hidden: Vec<f64> = pre_hidden.iter().map(|&a| softplus(a)).collect();
    if let Some(mask) = &noise.dropout_mask {
        hidden.iter_mut().zip(mask).for_each(|(h, r)| *h *= r);
    }

    let mut mu = params.mu_weight.vec_mul(&hidden);
    mu.iter_mut().zip(params.mu_bias.row(0)).for_each(|(x, b)| *x += b);
    let mut logvar_raw = params.logvar_weight.vec_mul(&hidden);
    logvar_raw
        .iter_mut()
        .zip(params.logvar_bias.row(0))
        .for_each(|(x, b)| *x += b);
    let logvar: Vec<f64> = logvar_raw
        .iter()
        .map(|x| x.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
        .collect();

    let z: Vec<f64> = mu
        .iter()
        .zip(&logvar)
        .zip(&noise.eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect();
    let theta = softmax(&z).map_err(|_| NumericError::NonFinite("encoder activations".into()))?;

    Ok(ForwardTrace {
        pre_hidden,
        hidden,
        dropout_mask: noise.dropout_mask.clone(),
        mu,
        logvar_raw,
        logvar,
        eps: noise.eps.clone(),
        theta,
    })
}

/// `log_softmax((m + θᵀB) / T)`.
pub fn decode(theta: &[f64], params: &ModelParams, temperature: f64) -> Result<Vec<f64>, ModelError> {
    let mut eta = params.decoder_logits(theta);
    if temperature != 1.0 {
        eta.iter_mut().for_each(|x| *x /= temperature);
    }
    log_softmax(&eta).map_err(|_| NumericError::NonFinite("decoder logits".into()).into())
}

/// Negative multinomial log-likelihood `-Σ_v count_v · log p_v`.
pub fn recon_loss(doc: &BowDocument, log_probs: &[f64]) -> f64 {
    -doc.entries()
        .iter()
        .map(|&(w, c)| c as f64 * log_probs[w])
        .sum::<f64>()
}

/// KL divergence between diagonal Gaussians `N(μ, e^logvar)` and the prior.
pub fn kl_term(mu: &[f64], logvar: &[f64], prior: &PriorLN) -> Result<f64, ModelError> {
    if prior.var.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(ModelError::InvalidHyper("prior variance must be positive".into()));
    }
    let mut sum = 0.0;
    for k in 0..mu.len() {
        let pv = prior.var[k];
        let diff = prior.mean[k] - mu[k];
        sum += logvar[k].exp() / pv + diff * diff / pv - 1.0 + pv.ln() - logvar[k];
    }
    Ok(0.5 * sum)
}

/// Gradient of the batch-mean loss with respect to every trainable tensor.
///
/// `grad_logits[i]` is `∂loss_i/∂η_i` for document `i`; the KL term enters
/// through `kl_weight`. Documents are reduced in batch order.
pub fn backward(
    batch: &[&BowDocument],
    traces: &[ForwardTrace],
    grad_logits: &[Vec<f64>],
    kl_weight: f64,
    prior: &PriorLN,
    params: &ModelParams,
) -> Result<Gradients, ModelError> {
    if traces.len() != batch.len() || grad_logits.len() != batch.len() || batch.is_empty() {
        return Err(ModelError::MissingTrace {
            docs: batch.len(),
            traces: traces.len(),
            grads: grad_logits.len(),
        });
    }
    let mut grads = Gradients::zeros_like(params);
    for ((doc, trace), g_eta) in batch.iter().zip(traces).zip(grad_logits) {
        accumulate_doc(&mut grads, doc, trace, g_eta, kl_weight, prior, params);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.tensors.iter_mut().for_each(|m| m.scale(inv));
    if let Some(i) = grads.tensors.iter().position(|m| !m.is_finite()) {
        return Err(NumericError::NonFinite(format!("gradient of {}", PARAM_NAMES[i])).into());
    }
    Ok(grads)
}

fn accumulate_doc(
    grads: &mut Gradients,
    doc: &BowDocument,
    trace: &ForwardTrace,
    g_eta: &[f64],
    kl_weight: f64,
    prior: &PriorLN,
    params: &ModelParams,
) {
    let [g_embed, g_enc_bias, g_mu_w, g_mu_b, g_lv_w, g_lv_b, g_beta] = &mut grads.tensors;
    let theta = &trace.theta;

    // decoder: η = m + θᵀB
    g_beta.add_outer(theta, g_eta, 1.0);
    let g_theta = params.beta.mul_vec(g_eta);

    // θ = softmax(z)
    let mean_g = dot(theta, &g_theta);
    let g_z: Vec<f64> = theta
        .iter()
        .zip(&g_theta)
        .map(|(t, g)| t * (g - mean_g))
        .collect();

    // z = μ + exp(logvar/2)·ε, plus the KL term
    let k = theta.len();
    let mut g_mu = vec![0.0; k];
    let mut g_lv = vec![0.0; k];
    for j in 0..k {
        let pv = prior.var[j];
        let sigma = (trace.logvar[j] / 2.0).exp();
        g_mu[j] = g_z[j] + kl_weight * (trace.mu[j] - prior.mean[j]) / pv;
        let g = g_z[j] * trace.eps[j] * sigma / 2.0
            + kl_weight * 0.5 * (trace.logvar[j].exp() / pv - 1.0);
        let inside = trace.logvar_raw[j].abs() <= LOGVAR_CLAMP;
        g_lv[j] = if inside { g } else { 0.0 };
    }

    g_mu_w.add_outer(&trace.hidden, &g_mu, 1.0);
    g_lv_w.add_outer(&trace.hidden, &g_lv, 1.0);
    g_mu_b.row_mut(0).iter_mut().zip(&g_mu).for_each(|(a, b)| *a += b);
    g_lv_b.row_mut(0).iter_mut().zip(&g_lv).for_each(|(a, b)| *a += b);

    // hidden = dropout(softplus(pre_hidden))
    let mut g_hidden = params.mu_weight.mul_vec(&g_mu);
    for (a, b) in g_hidden.iter_mut().zip(params.logvar_weight.mul_vec(&g_lv)) {
        *a += b;
    }
    if let Some(mask) = &trace.dropout_mask {
        g_hidden.iter_mut().zip(mask).for_each(|(g, r)| *g *= r);
    }
    let g_pre: Vec<f64> = g_hidden
        .iter()
        .zip(&trace.pre_hidden)
        .map(|(g, &a)| g * sigmoid(a))
        .collect();

    g_enc_bias.row_mut(0).iter_mut().zip(&g_pre).for_each(|(a, b)| *a += b);
    for &(w, c) in doc.entries() {
        let c = c as f64;
        for (a, b) in g_embed.row_mut(w).iter_mut().zip(&g_pre) {
            *a += c * b;
        }
    }
}

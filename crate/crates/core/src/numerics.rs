//! Dense matrices, stable softmax kernels, seeded randomness and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("empty input to {0}")]
    Empty(&'static str),
}

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if data.len() != rows * cols {
            return Err(NumericError::ShapeMismatch {
                name: "matrix data".into(),
                expected: (rows, cols),
                actual: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Fills a matrix with `N(0, std²)` draws, consuming `rng` row by row.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = rng.standard_normal(rows * cols).into_iter().map(|x| x * std).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `xᵀ · self` for a row vector `x` of length `rows`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        out
    }

    /// `self · y` for a column vector `y` of length `cols`.
    pub fn mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), y)).collect()
    }

    /// `self += scale * (x ⊗ y)`.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64], scale: f64) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            let a = scale * xr;
            if a == 0.0 {
                continue;
            }
            for (o, yc) in self.row_mut(r).iter_mut().zip(y) {
                *o += a * yc;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(xs: &[f64], what: &str) -> Result<(), NumericError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericError::NonFinite(what.to_string()))
    }
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, NumericError> {
    if logits.is_empty() {
        return Err(NumericError::Empty("log_softmax"));
    }
    check_finite(logits, "log_softmax input")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_norm = max + sum.ln();
    Ok(logits.iter().map(|&x| x - log_norm).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumericError> {
    if logits.is_empty() {
        return Err(NumericError::Empty("softmax"));
    }
    check_finite(logits, "softmax input")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic random stream keyed by a 64-bit seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.inner.sample(StandardNormal)).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let first: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is malformed.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Matrix)],
        grads: &[&Matrix],
    ) -> Result<(), NumericError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumericError::ShapeMismatch {
                name: "parameter set".into(),
                expected: (self.first.len(), 1),
                actual: (params.len(), grads.len()),
            });
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NumericError::ShapeMismatch {
                    name: name.to_string(),
                    expected: self.first[i].shape(),
                    actual: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(NumericError::NonFinite(format!("gradient of {name}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let ln2 = std::f64::consts::LN_2;
        for input in [[0.0, 0.0], [1000.0, 1000.0]] {
            let out = log_softmax(&input).unwrap();
            // 1000 + ln 2 is only representable to ~1e-13
            assert!((out[0] + ln2).abs() < 1e-12 && (out[1] + ln2).abs() < 1e-12);
            assert_eq!(out[0], out[1]);
        }
    }

    #[test]
    fn log_softmax_matches_extended_precision() {
        // 40-digit mpmath evaluation of x - log(e^2 + e^1 + e^0)
        let frozen = [-0.4076059644443803, -1.4076059644443804, -2.40760596444438];
        let out = log_softmax(&[2.0, 1.0, 0.0]).unwrap();
        for i in 0..3 {
            assert!((out[i] - frozen[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        assert!(log_softmax(&[0.0, f64::NAN]).is_err());
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[(1, 1)]);
        st.step(&mut [("p", &mut p)], &[&g]).unwrap();
        assert!((p.get(0, 0) - 0.5 + 0.1).abs() < 1e-6);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let g = Matrix::zeros(1, 3);
        let mut st = AdamState::new(AdamConfig::default(), &[(1, 3)]);
        st.step(&mut [("p", &mut p)], &[&g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_rejects_nan_and_names_tensor() {
        let mut p = Matrix::zeros(2, 2);
        let mut g = Matrix::zeros(2, 2);
        g.set(1, 1, f64::NAN);
        let mut st = AdamState::new(AdamConfig::default(), &[(2, 2)]);
        let err = st.step(&mut [("beta", &mut p)], &[&g]).unwrap_err();
        assert!(err.to_string().contains("beta"));
        assert_eq!(st.step_count(), 0);
        let bad = Matrix::zeros(3, 2);
        assert!(matches!(
            st.step(&mut [("beta", &mut p)], &[&bad]),
            Err(NumericError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adam_equal_gradients_equal_updates() {
        let mut p = Matrix::from_vec(1, 2, vec![0.3, 0.3]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![0.7, 0.7]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[(1, 2)]);
        for _ in 0..5 {
            st.step(&mut [("p", &mut p)], &[&g]).unwrap();
        }
        assert_eq!(p.get(0, 0), p.get(0, 1));
    }

    #[test]
    fn normal_stream_is_seeded() {
        let a = SeededRng::new(11).standard_normal(16);
        let b = SeededRng::new(11).standard_normal(16);
        let c = SeededRng::new(12).standard_normal(16);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments_million_samples() {
        let xs = SeededRng::new(2024).standard_normal(1_000_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    proptest! {
        #[test]
        fn log_softmax_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..20),
            c in -1e3f64..1e3,
        ) {
            let a = log_softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = log_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            let total: f64 = a.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn adam_commutes_with_permutation(
            g in prop::collection::vec(-5.0f64..5.0, 3),
            p0 in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let mats: Vec<Matrix> = p0.iter().map(|&x| Matrix::from_vec(1, 1, vec![x]).unwrap()).collect();
            let grads: Vec<Matrix> = g.iter().map(|&x| Matrix::from_vec(1, 1, vec![x]).unwrap()).collect();
            let order = [2usize, 0, 1];

            let mut fwd = mats.clone();
            let mut st = AdamState::new(AdamConfig::default(), &[(1, 1); 3]);
            {
                let (a, rest) = fwd.split_at_mut(1);
                let (b, c) = rest.split_at_mut(1);
                let mut ps = [("a", &mut a[0]), ("b", &mut b[0]), ("c", &mut c[0])];
                st.step(&mut ps, &[&grads[0], &grads[1], &grads[2]]).unwrap();
            }
            let mut perm: Vec<Matrix> = order.iter().map(|&i| mats[i].clone()).collect();
            let mut st2 = AdamState::new(AdamConfig::default(), &[(1, 1); 3]);
            {
                let (a, rest) = perm.split_at_mut(1);
                let (b, c) = rest.split_at_mut(1);
                let mut ps = [("a", &mut a[0]), ("b", &mut b[0]), ("c", &mut c[0])];
                let gp: Vec<&Matrix> = order.iter().map(|&i| &grads[i]).collect();
                st2.step(&mut ps, &gp).unwrap();
            }
            for (j, &i) in order.iter().enumerate() {
                prop_assert_eq!(&perm[j], &fwd[i]);
            }
        }
    }
}

//! Multinomial logistic-regression probe.
//!
//! Objective: mean softmax cross-entropy plus `(lambda / 2) * ||W||_F^2`, bias
//! unregularized. Minimized by full-batch gradient descent with Armijo
//! backtracking from a zero start, which makes training a pure function of
//! `(X, y, config)`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::FeatureMatrix;
use crate::embedcache::checksum;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no training examples")]
    Empty,
    #[error("all training labels are identical; probe undefined")]
    SingleClass,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("feature dimension {found} does not match model dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid probe config: {0}")]
    BadConfig(String),
    #[error("accuracy of empty prediction list")]
    EmptyPrediction,
    #[error("probe file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    FullBatchGdWithBacktracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2_lambda: f64,
    pub max_iters: usize,
    /// Stop once the gradient's infinity norm drops to this value.
    pub tolerance: f64,
    /// Carried for run identity; the zero start makes training seed-free.
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_lambda: 1.0,
            max_iters: 1000,
            tolerance: 1e-6,
            seed: 0,
            optimizer: Optimizer::FullBatchGdWithBacktracking,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(ProbeError::BadConfig("tolerance must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(ProbeError::BadConfig("max_iters must be >= 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(ProbeError::BadConfig(
                "l2_lambda must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Telemetry {
    pub iters_used: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// Loss at the start and after every accepted step.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `C x d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub label_order: Vec<String>,
    pub telemetry: Telemetry,
}

/// Gradient with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradient {
    pub fn inf_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn sq_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .map(|v| v * v)
            .sum()
    }
}

impl ProbeModel {
    pub fn zeros(label_order: Vec<String>, dim: usize) -> Self {
        let c = label_order.len();
        ProbeModel {
            weights: Array2::zeros((c, dim)),
            bias: Array1::zeros(c),
            label_order,
            telemetry: Telemetry::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.label_order.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `n x C` logits.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(ProbeError::DimMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }
}

/// Converts features to the f64 design matrix used by the probe.
pub fn design_matrix(features: &FeatureMatrix) -> Array2<f64> {
    Array2::from_shape_vec(
        (features.n, features.d),
        features.data.iter().map(|&v| v as f64).collect(),
    )
    .expect("feature matrix shape")
}

/// Maps label strings to indices in `label_order`.
pub fn encode_labels<S: AsRef<str>>(labels: &[S], label_order: &[String]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            label_order
                .iter()
                .position(|o| o == l.as_ref())
                .ok_or_else(|| ProbeError::UnknownLabel(l.as_ref().to_string()))
        })
        .collect()
}

fn check_inputs(x: ArrayView2<'_, f64>, y: &[usize], classes: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(ProbeError::LengthMismatch {
            features: x.nrows(),
            labels: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(ProbeError::Empty);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("features"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(ProbeError::LabelOutOfRange {
            index: bad,
            classes,
        });
    }
    Ok(())
}

/// Regularized mean cross-entropy and its exact gradient.
pub fn softmax_xent_loss(
    model: &ProbeModel,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    l2_lambda: f64,
) -> Result<(f64, Gradient)> {
    check_inputs(x, y, model.classes())?;
    if model
        .weights
        .iter()
        .chain(model.bias.iter())
        .any(|v| !v.is_finite())
    {
        return Err(ProbeError::NonFinite("parameters"));
    }
    Ok(loss_and_grad(&model.weights, &model.bias, x, y, l2_lambda))
}

fn loss_and_grad(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    l2_lambda: f64,
) -> (f64, Gradient) {
    let n = x.nrows() as f64;
    let mut scores = x.dot(&w.t()) + b;
    let mut data_loss = 0.0;
    for (mut row, &label) in scores.axis_iter_mut(Axis(0)).zip(y) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let label_shifted = row[label] - max;
        row.mapv_inplace(|v| (v - max).exp());
        let z: f64 = row.iter().sum();
        data_loss += z.ln() - label_shifted;
        row.mapv_inplace(|v| v / z);
        row[label] -= 1.0;
    }
    // scores now holds (p - onehot)
    let mut gw = scores.t().dot(&x) / n;
    gw.scaled_add(l2_lambda, w);
    let gb = scores.sum_axis(Axis(0)) / n;
    let reg = 0.5 * l2_lambda * w.iter().map(|v| v * v).sum::<f64>();
    (
        data_loss / n + reg,
        Gradient {
            weights: gw,
            bias: gb,
        },
    )
}

fn loss_only(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    l2_lambda: f64,
) -> f64 {
    let scores = x.dot(&w.t()) + b;
    let mut data_loss = 0.0;
    for (row, &label) in scores.axis_iter(Axis(0)).zip(y) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        data_loss += z.ln() - (row[label] - max);
    }
    data_loss / x.nrows() as f64 + 0.5 * l2_lambda * w.iter().map(|v| v * v).sum::<f64>()
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e6;

/// Trains a probe on `x` (`n x d`) with label indices `y` into `label_order`.
pub fn train(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    label_order: Vec<String>,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    let classes = label_order.len();
    check_inputs(x, y, classes)?;
    if y.iter().all(|&l| l == y[0]) {
        return Err(ProbeError::SingleClass);
    }

    let mut w = Array2::<f64>::zeros((classes, x.ncols()));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut loss, mut grad) = loss_and_grad(&w, &b, x, y, config.l2_lambda);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut iters = 0;
    let mut converged = grad.inf_norm() <= config.tolerance;

    while !converged && iters < config.max_iters {
        iters += 1;
        let g_sq = grad.sq_norm();
        let accepted = loop {
            let w_try = &w - &(step * &grad.weights);
            let b_try = &b - &(step * &grad.bias);
            let trial = loss_only(&w_try, &b_try, x, y, config.l2_lambda);
            if trial.is_finite() && trial <= loss - ARMIJO_C * step * g_sq {
                break Some((w_try, b_try));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((w_new, b_new)) = accepted else {
            // no representable descent step left: at the optimum to machine precision
            break;
        };
        w = w_new;
        b = b_new;
        let (l, g) = loss_and_grad(&w, &b, x, y, config.l2_lambda);
        loss = l;
        grad = g;
        history.push(loss);
        converged = grad.inf_norm() <= config.tolerance;
        step = (step * 2.0).min(MAX_STEP);
    }

    if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("trained parameters"));
    }
    Ok(ProbeModel {
        weights: w,
        bias: b,
        label_order,
        telemetry: Telemetry {
            iters_used: iters,
            final_loss: loss,
            final_grad_norm: grad.inf_norm(),
            loss_history: history,
            converged,
        },
    })
}

/// Predicted label index per row: argmax of logits, ties to the lower index.
pub fn predict_indices(model: &ProbeModel, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let logits = model.logits(x)?;
    Ok(logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn predict(model: &ProbeModel, x: ArrayView2<'_, f64>) -> Result<Vec<String>> {
    Ok(predict_indices(model, x)?
        .into_iter()
        .map(|i| model.label_order[i].clone())
        .collect())
}

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(ProbeError::LengthMismatch {
            features: pred.len(),
            labels: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(ProbeError::EmptyPrediction);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

const MODEL_MAGIC: [u8; 4] = *b"CPPM";
const MODEL_VERSION: u16 = 1;

impl ProbeModel {
    /// Versioned little-endian serialization with a trailing CRC-64 checksum,
    /// same discipline as the activation cache.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for label in &self.label_order {
            out.extend_from_slice(&(label.len() as u32).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
        }
        for v in self.weights.iter().chain(self.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let t = &self.telemetry;
        out.extend_from_slice(&(t.iters_used as u64).to_le_bytes());
        out.extend_from_slice(&t.final_loss.to_le_bytes());
        out.extend_from_slice(&t.final_grad_norm.to_le_bytes());
        out.push(t.converged as u8);
        out.extend_from_slice(&(t.loss_history.len() as u64).to_le_bytes());
        for v in &t.loss_history {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| ProbeError::Format(m.to_string());
        if bytes.len() < 8 {
            return Err(fail("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(fail("checksum mismatch"));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| fail("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(ProbeError::Format(format!("unsupported version {version}")));
        }
        let c = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut labels = Vec::with_capacity(c);
        for _ in 0..c {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            labels
                .push(String::from_utf8(take(len)?.to_vec()).map_err(|_| fail("label not UTF-8"))?);
        }
        let mut f64s = |count: usize| -> Result<Vec<f64>> {
            let raw = take(count.checked_mul(8).ok_or_else(|| fail("size overflow"))?)?;
            Ok(raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect())
        };
        let weights = Array2::from_shape_vec((c, d), f64s(c * d)?).map_err(|_| fail("shape"))?;
        let bias = Array1::from(f64s(c)?);
        let iters_used = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let final_loss = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let final_grad_norm = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let converged = take(1)?[0] == 1;
        let hist_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(
            hist_len
                .checked_mul(8)
                .ok_or_else(|| fail("size overflow"))?,
        )?;
        let loss_history = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if pos != body.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(ProbeModel {
            weights,
            bias,
            label_order: labels,
            telemetry: Telemetry {
                iters_used,
                final_loss,
                final_grad_norm,
                loss_history,
                converged,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

//! Trainable projection head over frozen base embeddings.
//!
//! A base embedding `x` is (optionally) dropout-masked, passed through one dense
//! layer with a Tanh non-linearity to give the representation `h`, and each
//! classifier head maps `h` to logits with a bias-free linear map. The three
//! training objectives and their analytic gradients live in [`loss`]; the Adam
//! update in [`optim`].

mod loss;
mod optim;

pub use loss::{ce_step, encode_labels, find_retained_head, lwf_step, supervised_step, ucl_step, Gradients};
pub use optim::{apply_update, AdamState};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Linear classifier over representations (`k × d_h`, no bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub w: Matrix,
    pub label_space: Vec<String>,
}

impl ClassifierHead {
    /// Small Gaussian initialisation (σ = 0.01).
    pub fn new(label_space: Vec<String>, hidden_dim: usize, seed: u64) -> Result<Self> {
        check_label_space(&label_space)?;
        let mut rng = SplitMix64::new(seed);
        let data = (0..label_space.len() * hidden_dim)
            .map(|_| 0.01 * rng.normal())
            .collect();
        Ok(Self {
            w: Matrix::from_vec(label_space.len(), hidden_dim, data)?,
            label_space,
        })
    }

    pub fn k(&self) -> usize {
        self.label_space.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.label_space.iter().position(|l| l == label)
    }
}

fn check_label_space(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("label space must not be empty".into()));
    }
    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("duplicate label `{}` in label space", w[0])));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d_h × d`
    pub w_dense: Matrix,
    pub b_dense: Vec<f64>,
    pub heads: Vec<ClassifierHead>,
    pub dropout_rate: f64,
}

impl EncoderParams {
    /// Dense weights ~ N(0, 1/d), zero bias, no heads.
    pub fn new(input_dim: usize, hidden_dim: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "need d >= 1 and d_h >= 2, got d={input_dim}, d_h={hidden_dim}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must lie in [0, 1), got {dropout_rate}")));
        }
        let mut rng = SplitMix64::new(seed);
        let scale = 1.0 / libm::sqrt(input_dim as f64);
        let data = (0..hidden_dim * input_dim).map(|_| scale * rng.normal()).collect();
        Ok(Self {
            w_dense: Matrix::from_vec(hidden_dim, input_dim, data)?,
            b_dense: alloc::vec![0.0; hidden_dim],
            heads: Vec::new(),
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_dense.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_dense.rows()
    }

    /// Checks shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim() < 2 {
            return Err(Error::InvalidArgument("d_h must be at least 2".into()));
        }
        if self.b_dense.len() != self.hidden_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim(),
                actual: self.b_dense.len(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("dropout rate must lie in [0, 1)".into()));
        }
        if !self.w_dense.is_finite() || !self.b_dense.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dense layer".into()));
        }
        for (i, head) in self.heads.iter().enumerate() {
            check_label_space(&head.label_space)?;
            if head.w.rows() != head.k() || head.w.cols() != self.hidden_dim() {
                return Err(Error::InvalidArgument(format!("head {i} has the wrong shape")));
            }
            if !head.w.is_finite() {
                return Err(Error::NonFinite(format!("head {i}")));
            }
        }
        Ok(())
    }

    pub fn head_index(&self, label_space: &[String]) -> Option<usize> {
        self.heads.iter().position(|h| h.label_space == label_space)
    }

    /// Returns the head over exactly this label space, creating it if needed.
    pub fn ensure_head(&mut self, label_space: &[String], seed: u64) -> Result<usize> {
        if let Some(i) = self.head_index(label_space) {
            return Ok(i);
        }
        self.heads
            .push(ClassifierHead::new(label_space.to_vec(), self.hidden_dim(), seed)?);
        Ok(self.heads.len() - 1)
    }

    /// Drops every head whose index is not listed; returns the new index of
    /// each kept head, in the order given.
    pub fn retain_heads(&mut self, keep: &[usize]) -> Vec<usize> {
        let mut kept_sorted: Vec<usize> = keep.to_vec();
        kept_sorted.sort_unstable();
        kept_sorted.dedup();
        let mut i = 0;
        self.heads.retain(|_| {
            let k = kept_sorted.binary_search(&i).is_ok();
            i += 1;
            k
        });
        keep.iter()
            .map(|k| kept_sorted.binary_search(k).expect("deduplicated"))
            .collect()
    }

    /// Inference-mode representation of one base embedding.
    pub fn represent(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(dense_tanh(&self.w_dense, &self.b_dense, x))
    }

    /// Inference-mode representations of every row.
    pub fn represent_all(&self, xs: &Matrix) -> Result<Matrix> {
        check_dim(self.input_dim(), xs.cols())?;
        let mut out = Matrix::zeros(xs.rows(), self.hidden_dim());
        for (i, x) in xs.iter_rows().enumerate() {
            out.row_mut(i)
                .copy_from_slice(&dense_tanh(&self.w_dense, &self.b_dense, x));
        }
        Ok(out)
    }

    /// Predicted class of each row under the given head.
    pub fn classify(&self, head: usize, xs: &Matrix) -> Result<Vec<usize>> {
        let head = self.heads.get(head).ok_or(Error::MissingHead(head))?;
        let reps = self.represent_all(xs)?;
        Ok(reps
            .iter_rows()
            .map(|h| argmax(&head.w.mul_vec(h)))
            .collect())
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn dense_tanh(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = w.mul_vec(x);
    for (zi, bi) in z.iter_mut().zip(b) {
        *zi = libm::tanh(*zi + bi);
    }
    z
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverted-dropout mask: each coordinate is kept with probability `1 − p`
/// and scaled by `1/(1 − p)`.
pub fn dropout_mask(dim: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..dim)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}

/// One forward pass, keeping what backpropagation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Input after dropout.
    pub input: Vec<f64>,
    pub h: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

/// Forward pass. Without a seed (or with a zero dropout rate) this is the
/// deterministic inference path.
pub fn forward(params: &EncoderParams, x: &[f64], dropout_seed: Option<u64>) -> Result<Forward> {
    check_dim(params.input_dim(), x.len())?;
    let input: Vec<f64> = match dropout_seed {
        Some(seed) if params.dropout_rate > 0.0 => dropout_mask(x.len(), params.dropout_rate, seed)
            .iter()
            .zip(x)
            .map(|(m, v)| m * v)
            .collect(),
        _ => x.to_vec(),
    };
    let h = dense_tanh(&params.w_dense, &params.b_dense, &input);
    let logits = params.heads.iter().map(|hd| hd.w.mul_vec(&h)).collect();
    Ok(Forward { input, h, logits })
}

/// Hyper-parameters shared by the training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the distillation term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda: 0.5,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen copy of the dense layer plus (optionally) one designated head.
///
/// A snapshot without a head distils through the *current* head applied to the
/// old representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    w_dense: Matrix,
    b_dense: Vec<f64>,
    head: Option<ClassifierHead>,
}

impl ModelSnapshot {
    pub fn capture(params: &EncoderParams, head: Option<usize>) -> Result<Self> {
        let head = match head {
            Some(i) => Some(params.heads.get(i).cloned().ok_or(Error::MissingHead(i))?),
            None => None,
        };
        Ok(Self {
            w_dense: params.w_dense.clone(),
            b_dense: params.b_dense.clone(),
            head,
        })
    }

    pub fn head(&self) -> Option<&ClassifierHead> {
        self.head.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.w_dense.cols()
    }

    pub fn represent(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(dense_tanh(&self.w_dense, &self.b_dense, x))
    }
}

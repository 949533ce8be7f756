//! Training objectives with exact analytic gradients.
//!
//! * contrastive: InfoNCE over two dropout views of each input, cosine
//!   similarity scaled by `1/τ`, denominator over every candidate in the batch;
//! * cross-entropy over one classifier head;
//! * distillation: cross-entropy between a frozen snapshot's class distribution
//!   and the current model's distribution through a retained head;
//! * supervised: cross-entropy plus `λ` times distillation.
//!
//! Every function returns the mean loss over the batch and the gradient of that
//! mean with respect to all parameters.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::{forward, EncoderParams, Forward, ModelSnapshot, TrainConfig};
use crate::linalg::{axpy, dot, log_softmax, log_sum_exp, norm, softmax, Matrix};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Gradient with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_dense: Matrix,
    pub b_dense: Vec<f64>,
    pub heads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            w_dense: Matrix::zeros(params.w_dense.rows(), params.w_dense.cols()),
            b_dense: vec![0.0; params.b_dense.len()],
            heads: params
                .heads
                .iter()
                .map(|h| Matrix::zeros(h.w.rows(), h.w.cols()))
                .collect(),
        }
    }

    /// Flat views in the canonical parameter order: dense weights, dense
    /// bias, then each head.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.w_dense.as_slice(), self.b_dense.as_slice()];
        out.extend(self.heads.iter().map(Matrix::as_slice));
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if !self.w_dense.same_shape(&other.w_dense)
            || self.heads.len() != other.heads.len()
            || self.heads.iter().zip(&other.heads).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::InvalidArgument("gradient shapes differ".into()));
        }
        axpy(scale, other.w_dense.as_slice(), self.w_dense.as_mut_slice());
        axpy(scale, &other.b_dense, &mut self.b_dense);
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            axpy(scale, b.as_slice(), a.as_mut_slice());
        }
        Ok(())
    }
}

impl EncoderParams {
    /// Mutable flat views in the same order as [`Gradients::slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.w_dense.as_mut_slice(), self.b_dense.as_mut_slice()];
        out.extend(self.heads.iter_mut().map(|h| h.w.as_mut_slice()));
        out
    }
}

/// Backpropagates `dL/dlogits` (per head) and an extra `dL/dh` through the
/// heads, the Tanh and the dense layer.
fn backprop(
    params: &EncoderParams,
    grads: &mut Gradients,
    fwd: &Forward,
    head_terms: &[(usize, &[f64])],
    mut dh: Vec<f64>,
) {
    for &(head, dlogits) in head_terms {
        grads.heads[head].add_outer(1.0, dlogits, &fwd.h);
        axpy(1.0, &params.heads[head].w.tr_mul_vec(dlogits), &mut dh);
    }
    for (g, h) in dh.iter_mut().zip(&fwd.h) {
        *g *= 1.0 - h * h;
    }
    grads.w_dense.add_outer(1.0, &dh, &fwd.input);
    axpy(1.0, &dh, &mut grads.b_dense);
}

fn check_batch(params: &EncoderParams, batch: &[&[f64]], min: usize) -> Result<()> {
    if batch.len() < min {
        return Err(Error::BatchTooSmall {
            min,
            actual: batch.len(),
        });
    }
    for x in batch {
        if x.len() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                actual: x.len(),
            });
        }
    }
    Ok(())
}

/// Contrastive loss over two dropout views of each input.
///
/// View seeds are derived from `step_seed` and the sample position, so the
/// same `(params, batch, step_seed)` always yields the same loss.
pub fn ucl_step(
    params: &EncoderParams,
    batch: &[&[f64]],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch, 2)?;
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let n = batch.len();
    let tau = cfg.tau;
    let mut anchors = Vec::with_capacity(n);
    let mut positives = Vec::with_capacity(n);
    for (i, x) in batch.iter().enumerate() {
        anchors.push(forward(params, x, Some(derive_seed(step_seed, 2 * i as u64)))?);
        positives.push(forward(params, x, Some(derive_seed(step_seed, 2 * i as u64 + 1)))?);
    }
    let unit = |views: &[Forward]| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut dirs = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for (i, f) in views.iter().enumerate() {
            let len = norm(&f.h);
            if len == 0.0 {
                return Err(Error::DegenerateRepresentation(format!("zero-norm representation for sample {i}")));
            }
            dirs.push(f.h.iter().map(|v| v / len).collect());
            norms.push(len);
        }
        Ok((dirs, norms))
    };
    let (u_hat, u_norm) = unit(&anchors)?;
    let (v_hat, v_norm) = unit(&positives)?;

    let cos: Vec<Vec<f64>> = u_hat
        .iter()
        .map(|u| v_hat.iter().map(|v| dot(u, v)).collect())
        .collect();

    let mut loss = 0.0;
    // g[i][j] = dL/dcos_ij
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        let scores: Vec<f64> = cos[i].iter().map(|c| c / tau).collect();
        loss += log_sum_exp(&scores) - scores[i];
        let p = softmax(&scores);
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            g[i][j] = (p[j] - delta) / (n as f64 * tau);
        }
    }
    loss /= n as f64;

    let mut grads = Gradients::zeros_like(params);
    let dim = params.hidden_dim();
    let mut dv = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let mut du = vec![0.0; dim];
        for j in 0..n {
            let gij = g[i][j];
            // d cos(u, v) / du = (v̂ − cos·û)/|u|, and symmetrically for v
            axpy(gij / u_norm[i], &v_hat[j], &mut du);
            axpy(-gij * cos[i][j] / u_norm[i], &u_hat[i], &mut du);
            axpy(gij / v_norm[j], &u_hat[i], &mut dv[j]);
            axpy(-gij * cos[i][j] / v_norm[j], &v_hat[j], &mut dv[j]);
        }
        backprop(params, &mut grads, &anchors[i], &[], du);
    }
    for (f, d) in positives.iter().zip(dv) {
        backprop(params, &mut grads, f, &[], d);
    }
    Ok((loss, grads))
}

/// Maps label names to class indices of a head.
pub fn encode_labels<S: AsRef<str>>(params: &EncoderParams, head: usize, labels: &[S]) -> Result<Vec<usize>> {
    let head = params.heads.get(head).ok_or(Error::MissingHead(head))?;
    labels
        .iter()
        .map(|l| {
            head.class_index(l.as_ref())
                .ok_or_else(|| Error::UnknownLabel(l.as_ref().to_string()))
        })
        .collect()
}

/// Index of the head in `params` whose label space equals the snapshot's head.
pub fn find_retained_head(params: &EncoderParams, snapshot: &ModelSnapshot) -> Result<usize> {
    let old = snapshot.head().ok_or(Error::MissingRetainedHead)?;
    params
        .head_index(&old.label_space)
        .ok_or(Error::MissingRetainedHead)
}

/// Distillation source resolved against the current parameters.
struct Distill<'a> {
    snapshot: &'a ModelSnapshot,
    /// Head of `params` that produces the predictions.
    retained: usize,
}

impl Distill<'_> {
    /// Adds one sample's distillation term; returns its (unscaled) loss.
    fn sample(
        &self,
        params: &EncoderParams,
        grads: &mut Gradients,
        x: &[f64],
        fwd: &Forward,
        scale: f64,
        dlogits: &mut [f64],
    ) -> Result<f64> {
        let old_h = self.snapshot.represent(x)?;
        let shared = self.snapshot.head().is_none();
        let old_w = match self.snapshot.head() {
            Some(h) => &h.w,
            None => &params.heads[self.retained].w,
        };
        let target = softmax(&old_w.mul_vec(&old_h));
        let log_pred = log_softmax(&fwd.logits[self.retained]);
        let loss = -dot(&target, &log_pred);
        for ((d, lp), q) in dlogits.iter_mut().zip(&log_pred).zip(&target) {
            *d += scale * (libm::exp(*lp) - q);
        }
        if shared {
            // the target also depends on the current head
            let mean_lp = dot(&target, &log_pred);
            let d_old: Vec<f64> = target
                .iter()
                .zip(&log_pred)
                .map(|(q, lp)| -scale * q * (lp - mean_lp))
                .collect();
            grads.heads[self.retained].add_outer(1.0, &d_old, &old_h);
        }
        Ok(loss)
    }
}

fn resolve_distill<'a>(params: &EncoderParams, head: usize, snapshot: &'a ModelSnapshot) -> Result<Distill<'a>> {
    let retained = match snapshot.head() {
        Some(_) => find_retained_head(params, snapshot)?,
        None => head,
    };
    if snapshot.input_dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: snapshot.input_dim(),
        });
    }
    Ok(Distill { snapshot, retained })
}

fn sample_seed(step_seed: Option<u64>, i: usize) -> Option<u64> {
    step_seed.map(|s| derive_seed(s, i as u64))
}

/// Cross-entropy of one head; dropout is applied when `step_seed` is given.
pub fn ce_step(
    params: &EncoderParams,
    head: usize,
    batch: &[&[f64]],
    labels: &[usize],
    step_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let cfg = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    supervised_step(params, head, None, batch, labels, &cfg, step_seed)
}

/// Distillation from `snapshot` through head `head` of the current model.
///
/// When the snapshot carries a head, `head` must be the retained head over the
/// same label space; otherwise `head` itself supplies both the targets (on the
/// snapshot's representations) and the predictions.
pub fn lwf_step(
    params: &EncoderParams,
    head: usize,
    snapshot: &ModelSnapshot,
    batch: &[&[f64]],
    step_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch, 1)?;
    let current = params.heads.get(head).ok_or(Error::MissingHead(head))?;
    if let Some(old) = snapshot.head() {
        if old.label_space != current.label_space {
            return Err(Error::LabelSpaceMismatch(format!(
                "snapshot head has {} classes, head {head} has {}",
                old.k(),
                current.k()
            )));
        }
    }
    let distill = resolve_distill(params, head, snapshot)?;
    let distill = Distill {
        retained: head,
        ..distill
    };
    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (i, x) in batch.iter().enumerate() {
        let fwd = forward(params, x, sample_seed(step_seed, i))?;
        let mut dlogits = vec![0.0; current.k()];
        loss += distill.sample(params, &mut grads, x, &fwd, 1.0 / n, &mut dlogits)?;
        backprop(params, &mut grads, &fwd, &[(head, &dlogits)], vec![0.0; params.hidden_dim()]);
    }
    Ok((loss / n, grads))
}

/// Cross-entropy on `head` plus `cfg.lambda` times distillation from
/// `snapshot`. Both terms share one (dropout-masked) forward pass per sample.
pub fn supervised_step(
    params: &EncoderParams,
    head: usize,
    snapshot: Option<&ModelSnapshot>,
    batch: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
    step_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch, 1)?;
    let k = params.heads.get(head).ok_or(Error::MissingHead(head))?.k();
    if labels.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::UnknownLabel(format!("class index {bad} (head has {k} classes)")));
    }
    let distill = snapshot.map(|s| resolve_distill(params, head, s)).transpose()?;
    let lambda = cfg.lambda;
    let distill = distill.filter(|_| lambda > 0.0);

    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut ce_loss = 0.0;
    let mut lwf_loss = 0.0;
    for (i, (x, &y)) in batch.iter().zip(labels).enumerate() {
        let fwd = forward(params, x, sample_seed(step_seed, i))?;
        let log_p = log_softmax(&fwd.logits[head]);
        ce_loss -= log_p[y];
        let mut d_ce: Vec<f64> = log_p.iter().map(|lp| libm::exp(*lp) / n).collect();
        d_ce[y] -= 1.0 / n;
        match &distill {
            Some(d) => {
                let mut d_old = vec![0.0; params.heads[d.retained].k()];
                lwf_loss += d.sample(params, &mut grads, x, &fwd, lambda / n, &mut d_old)?;
                backprop(
                    params,
                    &mut grads,
                    &fwd,
                    &[(head, &d_ce), (d.retained, &d_old)],
                    vec![0.0; params.hidden_dim()],
                );
            }
            None => backprop(params, &mut grads, &fwd, &[(head, &d_ce)], vec![0.0; params.hidden_dim()]),
        }
    }
    let mut loss = ce_loss / n;
    if distill.is_some() {
        loss += lambda * (lwf_loss / n);
    }
    Ok((loss, grads))
}

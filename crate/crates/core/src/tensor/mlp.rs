//! Forward and backward passes of a tanh MLP with a softmax cross-entropy head.

use super::{Batch, GradientVector, ModelParams};
use crate::error::{Error, Result};

/// Mean cross-entropy and number of correct argmax predictions over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub correct: usize,
}

struct LayerView {
    w_off: usize,
    b_off: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layer_views(params: &ModelParams) -> Vec<LayerView> {
    // Layout alternates weight, bias per layer.
    params
        .layout
        .chunks(2)
        .zip(params.arch().windows(2))
        .map(|(pair, widths)| LayerView {
            w_off: pair[0].offset,
            b_off: pair[1].offset,
            fan_in: widths[0],
            fan_out: widths[1],
        })
        .collect()
}

fn check_batch(params: &ModelParams, batch: &Batch<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let input = params.arch()[0];
    if batch.dim != input {
        return Err(Error::shape(format!(
            "batch feature dim {} does not match model input {input}",
            batch.dim
        )));
    }
    if batch.features.len() != batch.labels.len() * batch.dim {
        return Err(Error::shape("feature buffer length is not labels * dim"));
    }
    let classes = *params.arch().last().unwrap();
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::shape(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Activations of every layer for one sample; `acts[0]` is the input and the
/// last entry holds the logits.
fn forward_sample(params: &ModelParams, views: &[LayerView], x: &[f64]) -> Vec<Vec<f64>> {
    let v = &params.values;
    let mut acts = Vec::with_capacity(views.len() + 1);
    acts.push(x.to_vec());
    for (li, lv) in views.iter().enumerate() {
        let prev = &acts[li];
        let last = li + 1 == views.len();
        let out: Vec<f64> = (0..lv.fan_out)
            .map(|r| {
                let row = &v[lv.w_off + r * lv.fan_in..lv.w_off + (r + 1) * lv.fan_in];
                let z = v[lv.b_off + r] + row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>();
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

/// Softmax probabilities and the per-sample loss `logsumexp(z) - z[y]`.
fn softmax_xent(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (exps.iter().map(|e| e / sum).collect(), lse - logits[label])
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn forward_loss(params: &ModelParams, batch: &Batch<'_>) -> Result<LossReport> {
    check_batch(params, batch)?;
    let views = layer_views(params);
    let mut total = 0.0;
    let mut correct = 0;
    for (x, &y) in batch.rows() {
        let acts = forward_sample(params, &views, x);
        let logits = acts.last().unwrap();
        let (_, l) = softmax_xent(logits, y);
        total += l;
        if argmax(logits) == y {
            correct += 1;
        }
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(LossReport { loss, correct })
}

/// Exact gradient of [`forward_loss`]'s mean loss.
pub fn backward(params: &ModelParams, batch: &Batch<'_>) -> Result<GradientVector> {
    Ok(backward_with_loss(params, batch)?.0)
}

/// Gradient together with the loss report from the same pass.
pub(crate) fn backward_with_loss(
    params: &ModelParams,
    batch: &Batch<'_>,
) -> Result<(GradientVector, LossReport)> {
    check_batch(params, batch)?;
    let views = layer_views(params);
    let v = &params.values;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    let mut correct = 0;
    for (x, &y) in batch.rows() {
        let acts = forward_sample(params, &views, x);
        let logits = acts.last().unwrap();
        let (probs, l) = softmax_xent(logits, y);
        total += l;
        if argmax(logits) == y {
            correct += 1;
        }
        // dL/dz for the output layer.
        let mut delta = probs;
        delta[y] -= 1.0;
        for li in (0..views.len()).rev() {
            let lv = &views[li];
            let input = &acts[li];
            for r in 0..lv.fan_out {
                let d = delta[r];
                grad[lv.b_off + r] += d;
                let row = &mut grad[lv.w_off + r * lv.fan_in..lv.w_off + (r + 1) * lv.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if li > 0 {
                // Propagate through W and the tanh of the previous layer.
                let mut prev = vec![0.0; lv.fan_in];
                for r in 0..lv.fan_out {
                    let d = delta[r];
                    let row = &v[lv.w_off + r * lv.fan_in..lv.w_off + (r + 1) * lv.fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    let loss = total / m;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((GradientVector::new(grad), LossReport { loss, correct }))
}

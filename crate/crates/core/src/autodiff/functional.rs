//! Value-level numeric kernels on plain slices.
//!
//! The tape ops call these row kernels for their forward values; they are
//! also the public building blocks for metrics and inspection code that does
//! not need gradients.

use crate::error::{Error, Result};

/// Floor applied to the reference-side probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid_argument("softmax of an empty vector"));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid_argument("log_softmax of an empty vector"));
    }
    let mut out = vec![0.0; x.len()];
    log_softmax_into(x, &mut out);
    Ok(out)
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::invalid_argument(format!(
            "layer_norm: x has {} entries, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid_argument("layer_norm of an empty vector"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| {
            // eps = 0 on a constant vector: the deviation is exactly zero.
            let centered = v - mean;
            let normed = if centered == 0.0 { 0.0 } else { centered / denom };
            g * normed + b
        })
        .collect())
}

/// `−ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid_argument(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)?[target])
}

/// Mean cross-entropy over a batch of logit rows.
pub fn batch_cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid_argument(format!(
            "batch cross-entropy over {} rows and {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        total += cross_entropy(row, t)?;
    }
    Ok(total / logits.len() as f64)
}

/// `Σ p_k ln(p_k / q_k)` with `0·ln(0/q) = 0` and `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid_argument(format!(
            "kl_divergence: lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid_argument(format!(
                "kl_divergence: {name} sums to {s}"
            )));
        }
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk / qk.max(PROB_FLOOR)).ln())
        .sum())
}

/// `−Σ p_k ln q_k` for two probability vectors.
pub fn soft_cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid_argument(format!(
            "soft_cross_entropy: lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * qk.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

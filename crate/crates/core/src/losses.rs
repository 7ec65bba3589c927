//! Cross-entropy, intermediate distillation and token diversity, and the
//! weighting that combines them.

use serde::{Deserialize, Serialize};

use crate::autodiff::functional::{kl_divergence, log_softmax, soft_cross_entropy, softmax};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default weight on the distillation term.
pub const DEFAULT_ALPHA: f64 = 5000.0;

/// Which axis the distillation softmax runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdGranularity {
    /// Softmax over the hidden dimension at each sequence position.
    #[default]
    PerPosition,
    /// One softmax over the whole flattened `M×H` representation.
    Flattened,
}

/// `(T_n − 1) / T_n`.
pub fn lambda_for(tasks_seen: usize) -> Result<f64> {
    if tasks_seen < 1 {
        return Err(Error::invalid_argument("lambda needs at least one task"));
    }
    Ok((tasks_seen as f64 - 1.0) / tasks_seen as f64)
}

/// `min(L_div, 0.1·((1−λ)L_c + λ·α·L_ikd))` on detached values.
pub fn beta_for(l_div: f64, l_c: f64, l_ikd: f64, lambda: f64, alpha: f64) -> f64 {
    l_div.min(0.1 * ((1.0 - lambda) * l_c + lambda * alpha * l_ikd))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tasks_seen: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// `+1` minimizes the diversity cross-entropy, `−1` maximizes it.
    pub div_sign: f64,
}

impl LossWeights {
    /// Weights for `tasks_seen` tasks. With distillation off the λ mix is
    /// pinned to 0 so the classification term keeps its full weight.
    pub fn new(tasks_seen: usize, alpha: f64, distill: bool) -> Result<Self> {
        let lambda = if distill { lambda_for(tasks_seen)? } else { 0.0 };
        if tasks_seen < 1 {
            return Err(Error::invalid_argument("weights need at least one task"));
        }
        Ok(LossWeights {
            tasks_seen,
            alpha,
            lambda,
            div_sign: 1.0,
        })
    }

    pub fn with_div_sign(mut self, sign: f64) -> Self {
        self.div_sign = sign;
        self
    }
}

/// Detached magnitudes of one step's loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Classification term, including any EWC penalty.
    pub l_c: f64,
    pub l_ikd: f64,
    pub l_div: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub div_sign: f64,
    pub total: f64,
    /// The weighted EWC penalty folded into `l_c`; zero for other methods.
    pub ewc_penalty: f64,
}

impl LossBreakdown {
    /// `(1−λ)L_c + λαL_ikd + βL_div` recomputed from the stored magnitudes.
    pub fn weighted_sum(&self) -> f64 {
        (1.0 - self.lambda) * self.l_c + self.lambda * self.alpha * self.l_ikd + self.div_sign * self.beta * self.l_div
    }

    /// `0.1·((1−λ)L_c + λαL_ikd)`, the upper bound on β.
    pub fn beta_cap(&self) -> f64 {
        0.1 * ((1.0 - self.lambda) * self.l_c + self.lambda * self.alpha * self.l_ikd)
    }
}

/// Mean cross-entropy of `1×E` logit rows against logit-index targets.
pub fn cross_entropy(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid_argument(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut picks = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let ls = tape.log_softmax_rows(z)?;
        picks.push(tape.pick(ls, 0, t)?);
    }
    let total = tape.add_n(&picks)?;
    Ok(tape.scale(total, -1.0 / logits.len() as f64))
}

/// `KL(teacher ‖ student)` averaged over positions and samples.
///
/// `students[k]` is an `M×H` student representation and `teachers[k]` the
/// matching teacher values.
pub fn ikd_loss(tape: &mut Tape, students: &[Var], teachers: &[Tensor], granularity: KdGranularity) -> Result<Var> {
    if students.len() != teachers.len() || students.is_empty() {
        return Err(Error::invalid_argument(format!(
            "{} student and {} teacher representations",
            students.len(),
            teachers.len()
        )));
    }
    let mut terms = Vec::with_capacity(students.len());
    let mut positions = 0usize;
    for (&s, t) in students.iter().zip(teachers) {
        let (m, h) = tape.shape(s);
        if t.dims2() != (m, h) {
            return Err(Error::invalid_argument(format!(
                "student {m}×{h} against teacher {:?}",
                t.shape()
            )));
        }
        let (rows, cols, s) = match granularity {
            KdGranularity::PerPosition => (m, h, s),
            KdGranularity::Flattened => (1, m * h, tape.reshape(s, 1, m * h)?),
        };
        let mut p = Vec::with_capacity(rows * cols);
        let mut log_p = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            p.extend(softmax(row)?);
            log_p.extend(log_softmax(row)?);
        }
        // p·(log p − log q) with both logs from the same routine, so equal
        // inputs give exactly zero
        let log_q = tape.log_softmax_rows(s)?;
        let log_p = tape.constant(Tensor::matrix(rows, cols, log_p)?);
        let p = tape.constant(Tensor::matrix(rows, cols, p)?);
        let gap = tape.sub(log_p, log_q)?;
        let weighted = tape.mul(p, gap)?;
        terms.push(tape.sum(weighted));
        positions += rows;
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, 1.0 / positions as f64))
}

/// Mean over previous tokens of `−Σ softmax(τ_j)·log softmax(τ_i)`; a zero
/// constant when there are none.
pub fn div_loss(tape: &mut Tape, current: Var, previous: &[Tensor]) -> Result<Var> {
    if previous.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (_, g) = tape.shape(current);
    let mut terms = Vec::with_capacity(previous.len());
    let log_q = tape.log_softmax_rows(current)?;
    for prev in previous {
        if prev.len() != g {
            return Err(Error::invalid_argument(format!(
                "token length {} against current length {g}",
                prev.len()
            )));
        }
        let p = tape.constant(Tensor::row(softmax(prev.data())?));
        let w = tape.mul(p, log_q)?;
        terms.push(tape.sum(w));
    }
    let s = tape.add_n(&terms)?;
    Ok(tape.scale(s, -1.0 / previous.len() as f64))
}

/// Combines the three terms on the tape. Terms with a zero weight are left
/// out entirely so a first-task total is bit-equal to `L_c`.
pub fn total_loss(
    tape: &mut Tape,
    l_c: Var,
    l_ikd: Option<Var>,
    l_div: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let lc = tape.value(l_c).item();
    let likd = l_ikd.map_or(0.0, |v| tape.value(v).item());
    let ldiv = l_div.map_or(0.0, |v| tape.value(v).item());
    let lambda = weights.lambda;
    let alpha = weights.alpha;
    let beta = beta_for(ldiv, lc, likd, lambda, alpha);

    let mut total = if lambda == 0.0 { l_c } else { tape.scale(l_c, 1.0 - lambda) };
    if let Some(k) = l_ikd {
        if lambda != 0.0 {
            let w = tape.scale(k, lambda * alpha);
            total = tape.add(total, w)?;
        }
    }
    if let Some(d) = l_div {
        if beta != 0.0 {
            let w = tape.scale(d, weights.div_sign * beta);
            total = tape.add(total, w)?;
        }
    }
    let breakdown = LossBreakdown {
        l_c: lc,
        l_ikd: likd,
        l_div: ldiv,
        lambda,
        alpha,
        beta,
        div_sign: weights.div_sign,
        total: tape.value(total).item(),
        ewc_penalty: 0.0,
    };
    Ok((total, breakdown))
}

/// Value-only distillation loss for a single pair of representations.
pub fn ikd_value(student: &Tensor, teacher: &Tensor, granularity: KdGranularity) -> Result<f64> {
    if student.dims2() != teacher.dims2() {
        return Err(Error::invalid_argument(format!(
            "student {:?} against teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let (m, h) = student.dims2();
    let (rows, cols) = match granularity {
        KdGranularity::PerPosition => (m, h),
        KdGranularity::Flattened => (1, m * h),
    };
    let mut total = 0.0;
    for r in 0..rows {
        let p = softmax(&teacher.data()[r * cols..(r + 1) * cols])?;
        let q = softmax(&student.data()[r * cols..(r + 1) * cols])?;
        total += kl_divergence(&p, &q)?;
    }
    Ok(total / rows as f64)
}

/// Value-only diversity loss.
pub fn div_value(current: &[f64], previous: &[Vec<f64>]) -> Result<f64> {
    if previous.is_empty() {
        return Ok(0.0);
    }
    let q = softmax(current)?;
    let mut total = 0.0;
    for prev in previous {
        total += soft_cross_entropy(&softmax(prev)?, &q)?;
    }
    Ok(total / previous.len() as f64)
}

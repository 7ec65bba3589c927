//! Task-attention block, task tokens and task-specific classifier heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::functional::argmax;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::backbone::{attend, fan_in_std, LayerNorm, Mlp, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};

/// Learnable per-task query vector `τ_i` (a `1×G` parameter).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskToken {
    pub task: usize,
    #[serde(skip, default = "unset_id")]
    pub param: ParamId,
}

fn unset_id() -> ParamId {
    ParamId(usize::MAX)
}

impl TaskToken {
    pub fn new(store: &mut ParamStore, task: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let param = store.add(format!("tokens.{task}"), normal_tensor(rng, &[1, width], INIT_STD), true)?;
        Ok(TaskToken { task, param })
    }
}

/// Output of [`TaskAttentionBlock::forward`].
#[derive(Clone, Debug)]
pub struct TabOutput {
    /// `s_i^{D+1}`, a `1×G` row.
    pub output: Var,
    /// One `1×(M+1)` attention row per head.
    pub attention: Vec<Var>,
}

/// Attention block whose single query comes from the task token.
#[derive(Clone, Debug)]
pub struct TaskAttentionBlock {
    pub norm1: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub width: usize,
}

impl TaskAttentionBlock {
    pub fn new(store: &mut ParamStore, width: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid_argument(format!(
                "task attention width {width} not divisible by {heads} heads"
            )));
        }
        // Fan-in scale: at 0.02 the block's output barely depends on its
        // input and training stalls.
        let w = |name: &str, store: &mut ParamStore, rng: &mut Rng| {
            store.add(format!("tab.{name}"), normal_tensor(rng, &[width, width], fan_in_std(width)), true)
        };
        let wq = w("wq", store, rng)?;
        let wk = w("wk", store, rng)?;
        let wv = w("wv", store, rng)?;
        let wo = w("wo", store, rng)?;
        Ok(TaskAttentionBlock {
            norm1: LayerNorm::new(store, "tab.norm1", width)?,
            wq,
            wk,
            wv,
            wo,
            bo: store.add("tab.bo", Tensor::zeros(&[1, width]), true)?,
            norm2: LayerNorm::new(store, "tab.norm2", width)?,
            mlp: Mlp::new_fan_in(store, "tab.mlp", width, mlp_ratio, rng)?,
            heads,
            width,
        })
    }

    /// `s' = [τ; s^D]`, attention with the query taken from the normalized
    /// token row only, then a residual MLP. `sequence` may be `None` for an
    /// empty `s^D`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, token: Var, sequence: Option<Var>) -> Result<TabOutput> {
        let tw = tape.shape(token);
        if tw != (1, self.width) {
            return Err(Error::invalid_argument(format!(
                "task token has shape {tw:?}, expected 1×{}",
                self.width
            )));
        }
        let joined = match sequence {
            Some(s) => {
                let sw = tape.shape(s).1;
                if sw != self.width {
                    return Err(Error::invalid_argument(format!(
                        "sequence width {sw}, task attention width {}",
                        self.width
                    )));
                }
                tape.concat_rows(&[token, s])?
            }
            None => token,
        };
        let h = self.norm1.forward(tape, store, joined)?;
        let token_row = tape.slice_rows(h, 0, 1)?;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(token_row, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let (heads_out, attention) = attend(tape, q, k, v, self.heads)?;
        let wo = tape.param(store, self.wo);
        let bo = tape.param(store, self.bo);
        let o = tape.matmul(heads_out, wo)?;
        let attended = tape.add_row(o, bo)?;
        let n2 = self.norm2.forward(tape, store, attended)?;
        let m = self.mlp.forward(tape, store, n2)?;
        Ok(TabOutput {
            output: tape.add(m, attended)?,
            attention,
        })
    }

    pub fn parameter_ids(&self) -> Vec<ParamId> {
        vec![
            self.norm1.gamma,
            self.norm1.beta,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.bo,
            self.norm2.gamma,
            self.norm2.beta,
            self.mlp.w1,
            self.mlp.b1,
            self.mlp.w2,
            self.mlp.b2,
        ]
    }
}

/// Linear classifier for one task.
///
/// With accumulation the output width is `E_i = E_i^orig + E_{i−1}` and the
/// task's own labels live in the trailing slice starting at `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub task: usize,
    pub offset: usize,
    pub native_labels: usize,
    #[serde(skip, default = "unset_id")]
    pub weight: ParamId,
    #[serde(skip, default = "unset_id")]
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        task: usize,
        native_labels: usize,
        offset: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if native_labels == 0 {
            return Err(Error::invalid_argument("a head needs at least one label"));
        }
        let out = offset + native_labels;
        Ok(ClassifierHead {
            task,
            offset,
            native_labels,
            weight: store.add(format!("heads.{task}.weight"), normal_tensor(rng, &[width, out], fan_in_std(width)), true)?,
            bias: store.add(format!("heads.{task}.bias"), Tensor::zeros(&[1, out]), true)?,
        })
    }

    /// Total output width `E_i`.
    pub fn output_dim(&self) -> usize {
        self.offset + self.native_labels
    }

    /// Logit index of a native label.
    pub fn logit_index(&self, label: usize) -> Result<usize> {
        if label >= self.native_labels {
            return Err(Error::invalid_argument(format!(
                "label {label} out of range for task {} with {} labels",
                self.task, self.native_labels
            )));
        }
        Ok(self.offset + label)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }

    /// Native label predicted from a full logit row: argmax over the task's
    /// own slice, ties to the lowest index.
    pub fn predict(&self, logits: &[f64]) -> Result<usize> {
        if logits.len() != self.output_dim() {
            return Err(Error::invalid_argument(format!(
                "{} logits for a head of width {}",
                logits.len(),
                self.output_dim()
            )));
        }
        Ok(argmax(&logits[self.offset..]).expect("non-empty slice"))
    }
}

/// Head widths `E_i = E_i^orig + E_{i−1}` for a sequence of label counts.
pub fn accumulated_head_dims(label_counts: &[usize]) -> Vec<usize> {
    label_counts
        .iter()
        .scan(0, |acc, &n| {
            *acc += n;
            Some(*acc)
        })
        .collect()
}

/// `V'[k] = (V[2k] + V[2k+1]) / 2`.
pub fn compress_dual(concatenated: &[f64]) -> Result<Vec<f64>> {
    if concatenated.len() % 2 != 0 {
        return Err(Error::invalid_argument(format!(
            "dual compression needs an even length, got {}",
            concatenated.len()
        )));
    }
    Ok(concatenated.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect())
}

/// `[a0, b0, a1, b1, …]`.
pub fn interleave(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid_argument(format!(
            "interleaving lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).flat_map(|(x, y)| [*x, *y]).collect())
}

/// Joins two pooled branch rows and compresses them back to one row on the
/// tape.
pub fn fuse_dual(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let joined = tape.interleave(a, b)?;
    tape.pair_mean(joined)
}

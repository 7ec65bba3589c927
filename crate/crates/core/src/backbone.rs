//! Bimodal feature extraction: patch and word embeddings fused into one
//! sequence, followed by a stack of pre-norm self-attention blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-6;

/// `1/√fan_in`.
pub(crate) fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Shape of the shared encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 2,
            hidden: 32,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.to_string(),
                message,
            })
        };
        if self.depth == 0 {
            return bad("model.depth", "must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(
                "model.heads",
                format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads),
            );
        }
        if self.mlp_ratio == 0 {
            return bad("model.mlp_ratio", "must be at least 1".into());
        }
        if self.patch_size == 0 {
            return bad("model.patch_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Input geometry shared by every task trained on one backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl InputGeometry {
    pub fn num_patches(&self, patch_size: usize) -> usize {
        (self.image_height / patch_size) * (self.image_width / patch_size)
    }
}

/// Splits an `H×W×C` image into row-major `P×P` patches, each flattened
/// row-major, giving an `N×(P²·C)` matrix.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Tensor> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid_argument(format!(
            "image {h}×{w} is not divisible into {p}×{p} patches"
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let width = p * p * c;
    let mut data = Vec::with_capacity(ph * pw * width);
    for by in 0..ph {
        for bx in 0..pw {
            for dy in 0..p {
                let y = by * p + dy;
                let start = (y * w + bx * p) * c;
                data.extend_from_slice(&image.data[start..start + p * c]);
            }
        }
    }
    Tensor::matrix(ph * pw, width, data)
}

fn register(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<ParamId> {
    store.add(name, normal_tensor(rng, shape, INIT_STD), true)
}

fn register_const(store: &mut ParamStore, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
    store.add(name, Tensor::full(shape, value), true)
}

/// Image side of the input embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub projection: ParamId,
    pub position: ParamId,
    pub class_token: ParamId,
    pub type_vector: ParamId,
    pub patch_size: usize,
    pub channels: usize,
    pub num_patches: usize,
}

impl PatchEmbedder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        patch_size: usize,
        channels: usize,
        num_patches: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dim = patch_size * patch_size * channels;
        Ok(PatchEmbedder {
            projection: register(store, format!("{prefix}.projection"), &[dim, hidden], rng)?,
            position: register(store, format!("{prefix}.position"), &[num_patches + 1, hidden], rng)?,
            class_token: register(store, format!("{prefix}.class_token"), &[1, hidden], rng)?,
            type_vector: register(store, format!("{prefix}.type_vector"), &[1, hidden], rng)?,
            patch_size,
            channels,
            num_patches,
        })
    }

    /// `[v_class; v_1·V; …; v_N·V] + V_pos`, shape `(N+1)×H`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let dim = self.patch_size * self.patch_size * self.channels;
        let (n, width) = patches.dims2();
        if width != dim {
            return Err(Error::invalid_argument(format!(
                "patch length {width}, projection expects {dim}"
            )));
        }
        if n != self.num_patches {
            return Err(Error::invalid_argument(format!(
                "{n} patches, position table holds {}",
                self.num_patches
            )));
        }
        let input = tape.constant(patches.clone());
        let proj = tape.param(store, self.projection);
        let projected = tape.matmul(input, proj)?;
        let cls = tape.param(store, self.class_token);
        let seq = tape.concat_rows(&[cls, projected])?;
        let pos = tape.param(store, self.position);
        tape.add(seq, pos)
    }
}

/// Text side of the input embedding.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub table: ParamId,
    pub position: ParamId,
    pub class_token: ParamId,
    pub type_vector: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextEmbedder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        max_len: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(TextEmbedder {
            table: register(store, format!("{prefix}.table"), &[vocab_size, hidden], rng)?,
            position: register(store, format!("{prefix}.position"), &[max_len + 1, hidden], rng)?,
            class_token: register(store, format!("{prefix}.class_token"), &[1, hidden], rng)?,
            type_vector: register(store, format!("{prefix}.type_vector"), &[1, hidden], rng)?,
            vocab_size,
            max_len,
        })
    }

    /// `[t_class; T[l_1]; …; T[l_L']] + T_pos[0..L'+1]`, shape `(L'+1)×H`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, tokens: &[u32]) -> Result<Var> {
        if tokens.len() > self.max_len {
            return Err(Error::invalid_argument(format!(
                "{} tokens, maximum is {}",
                tokens.len(),
                self.max_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid_argument(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let cls = tape.param(store, self.class_token);
        let seq = if ids.is_empty() {
            cls
        } else {
            let table = tape.param(store, self.table);
            let words = tape.gather(table, &ids)?;
            tape.concat_rows(&[cls, words])?
        };
        let pos_all = tape.param(store, self.position);
        let pos = tape.slice_rows(pos_all, 0, ids.len() + 1)?;
        tape.add(seq, pos)
    }
}

/// `[v_type + v̄ ; t_type + t̄]`.
pub fn fuse_sequences(
    tape: &mut Tape,
    image_seq: Var,
    text_seq: Var,
    image_type: Var,
    text_type: Var,
) -> Result<Var> {
    let (wi, wt) = (tape.shape(image_seq).1, tape.shape(text_seq).1);
    if wi != wt {
        return Err(Error::invalid_argument(format!(
            "fusing sequences of width {wi} and {wt}"
        )));
    }
    let v = tape.add_row(image_seq, image_type)?;
    let t = tape.add_row(text_seq, text_type)?;
    tape.concat_rows(&[v, t])
}

/// Multi-head scaled dot-product attention on already-projected `q`, `k`,
/// `v`. Returns the concatenated head outputs and each head's attention
/// matrix.
pub(crate) fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let width = tape.shape(q).1;
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
        maps.push(attn);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, maps))
}

/// Layer-norm parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: register_const(store, format!("{prefix}.gamma"), &[1, width], 1.0)?,
            beta: register_const(store, format!("{prefix}.beta"), &[1, width], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm_rows(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        let inner = width * ratio;
        Ok(Mlp {
            w1: register(store, format!("{prefix}.w1"), &[width, inner], rng)?,
            b1: register_const(store, format!("{prefix}.b1"), &[1, inner], 0.0)?,
            w2: register(store, format!("{prefix}.w2"), &[inner, width], rng)?,
            b2: register_const(store, format!("{prefix}.b2"), &[1, width], 0.0)?,
        })
    }

    /// Same layout with weights drawn at `1/√fan_in`.
    pub fn new_fan_in(store: &mut ParamStore, prefix: &str, width: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        let inner = width * ratio;
        Ok(Mlp {
            w1: store.add(format!("{prefix}.w1"), normal_tensor(rng, &[width, inner], fan_in_std(width)), true)?,
            b1: register_const(store, format!("{prefix}.b1"), &[1, inner], 0.0)?,
            w2: store.add(format!("{prefix}.w2"), normal_tensor(rng, &[inner, width], fan_in_std(inner)), true)?,
            b2: register_const(store, format!("{prefix}.b2"), &[1, width], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }
}

/// One residual MSA + residual MLP block with pre-norm.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl SelfAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::invalid_argument(format!(
                "hidden {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttentionBlock {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), hidden)?,
            wq: register(store, format!("{prefix}.attn.wq"), &[hidden, hidden], rng)?,
            wk: register(store, format!("{prefix}.attn.wk"), &[hidden, hidden], rng)?,
            wv: register(store, format!("{prefix}.attn.wv"), &[hidden, hidden], rng)?,
            wo: register(store, format!("{prefix}.attn.wo"), &[hidden, hidden], rng)?,
            bo: register_const(store, format!("{prefix}.attn.bo"), &[1, hidden], 0.0)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), hidden)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), hidden, mlp_ratio, rng)?,
            heads,
        })
    }

    /// Returns the block output and the per-head attention matrices.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.norm1.forward(tape, store, x)?;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let (heads_out, maps) = attend(tape, q, k, v, self.heads)?;
        let wo = tape.param(store, self.wo);
        let bo = tape.param(store, self.bo);
        let o = tape.matmul(heads_out, wo)?;
        let o = tape.add_row(o, bo)?;
        let x1 = tape.add(x, o)?;
        let h2 = self.norm2.forward(tape, store, x1)?;
        let m = self.mlp.forward(tape, store, h2)?;
        Ok((tape.add(x1, m)?, maps))
    }
}

/// Output of [`Backbone::forward`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `s^D`, shape `(N + L' + 2)×H`.
    pub output: Var,
    /// Attention matrices, indexed `[block][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Patch embedder, text embedder and the self-attention stack.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub geometry: InputGeometry,
    pub image: PatchEmbedder,
    pub text: TextEmbedder,
    pub blocks: Vec<SelfAttentionBlock>,
}

impl Backbone {
    /// Registers all backbone parameters under `backbone.*`. A depth of zero
    /// is accepted here and yields an identity encoder.
    pub fn new(
        config: &BackboneConfig,
        geometry: &InputGeometry,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let p = config.patch_size;
        if p == 0 || geometry.image_height % p != 0 || geometry.image_width % p != 0 {
            return Err(Error::invalid_argument(format!(
                "image {}×{} is not divisible by patch size {p}",
                geometry.image_height, geometry.image_width
            )));
        }
        if config.heads == 0 || config.hidden % config.heads != 0 {
            return Err(Error::invalid_argument(format!(
                "hidden {} not divisible by {} heads",
                config.hidden, config.heads
            )));
        }
        let image = PatchEmbedder::new(
            store,
            "backbone.image",
            p,
            geometry.channels,
            geometry.num_patches(p),
            config.hidden,
            rng,
        )?;
        let text = TextEmbedder::new(
            store,
            "backbone.text",
            geometry.vocab_size,
            geometry.max_text_len,
            config.hidden,
            rng,
        )?;
        let blocks = (0..config.depth)
            .map(|d| {
                SelfAttentionBlock::new(
                    store,
                    &format!("backbone.blocks.{d}"),
                    config.hidden,
                    config.heads,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            config: config.clone(),
            geometry: geometry.clone(),
            image,
            text,
            blocks,
        })
    }

    /// Builds `s⁰` from one image and one token sequence.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, image: &Image, tokens: &[u32]) -> Result<Var> {
        let patches = patchify(image, self.config.patch_size)?;
        let v = self.image.embed(tape, store, &patches)?;
        let t = self.text.embed(tape, store, tokens)?;
        let vt = tape.param(store, self.image.type_vector);
        let tt = tape.param(store, self.text.type_vector);
        fuse_sequences(tape, v, t, vt, tt)
    }

    /// Runs the self-attention stack on `s⁰`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, s0: Var) -> Result<Encoded> {
        let width = tape.shape(s0).1;
        if width != self.config.hidden {
            return Err(Error::invalid_argument(format!(
                "sequence width {width}, backbone hidden {}",
                self.config.hidden
            )));
        }
        let mut x = s0;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, maps) = block.forward(tape, store, x)?;
            x = y;
            attention.push(maps);
        }
        Ok(Encoded { output: x, attention })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Image, tokens: &[u32]) -> Result<Encoded> {
        let s0 = self.embed(tape, store, image, tokens)?;
        self.encode(tape, store, s0)
    }

    /// Names of every parameter owned by the backbone.
    pub fn parameter_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.image.projection,
            self.image.position,
            self.image.class_token,
            self.image.type_vector,
            self.text.table,
            self.text.position,
            self.text.class_token,
            self.text.type_vector,
        ];
        for b in &self.blocks {
            ids.extend([
                b.norm1.gamma,
                b.norm1.beta,
                b.wq,
                b.wk,
                b.wv,
                b.wo,
                b.bo,
                b.norm2.gamma,
                b.norm2.beta,
                b.mlp.w1,
                b.mlp.b1,
                b.mlp.w2,
                b.mlp.b2,
            ]);
        }
        ids
    }
}

//! CLIP-like dual encoder: a patch-based image tower and a token-based text
//! tower sharing the same pre-norm transformer block structure, producing
//! L2-normalized embeddings and a scaled similarity matrix.
//!
//! The forward pass is written against tape nodes, so the same code serves
//! ordinary training (weights are grad leaves) and the mapping stage (weights
//! are expressions built from the compression maps).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

// required in no_std builds, where f64 inherent math is unavailable
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Input modality of one tower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputSpec {
    Text { vocab: usize, seq_len: usize },
    Image { grid: usize, patch: usize, channels: usize },
}

impl InputSpec {
    /// Sequence length seen by the transformer (grid^2 + CLS for images).
    pub fn token_count(&self) -> usize {
        match *self {
            InputSpec::Text { seq_len, .. } => seq_len,
            InputSpec::Image { grid, .. } => grid * grid + 1,
        }
    }

    pub fn patch_dim(&self) -> Option<usize> {
        match *self {
            InputSpec::Image { patch, channels, .. } => Some(patch * patch * channels),
            InputSpec::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub embed_dim: usize,
    pub input: InputSpec,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.ffn_mult == 0
            || self.embed_dim == 0
        {
            return Err(Error::Contract {
                op: "EncoderConfig",
                detail: format!("all sizes must be >= 1: {self:?}"),
            });
        }
        if self.width % self.heads != 0 {
            return Err(Error::Contract {
                op: "EncoderConfig",
                detail: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.width
    }

    /// Closed-form learnable-scalar count for one tower.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let f = self.ffn_dim();
        let t = self.input.token_count();
        let embed = match self.input {
            InputSpec::Text { vocab, .. } => vocab * d,
            InputSpec::Image { .. } => self.input.patch_dim().unwrap() * d + d, // patch embed + CLS
        };
        let per_layer = 4 * d * d + 4 * d      // attention weights + biases
            + f * d + f + d * f + d            // ffn
            + 4 * d; // two layer norms
        embed + t * d + self.depth * per_layer + 2 * d + self.embed_dim * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bq: Tensor<S>,
    pub bk: Tensor<S>,
    pub bv: Tensor<S>,
    pub bo: Tensor<S>,
    pub w_fc1: Tensor<S>,
    pub b_fc1: Tensor<S>,
    pub w_fc2: Tensor<S>,
    pub b_fc2: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<S: Scalar> {
    /// [vocab, D] token table for text; [patch_dim, D] patch projection for images.
    pub embed: Tensor<S>,
    /// [D] CLS embedding, image tower only.
    pub cls: Option<Tensor<S>>,
    /// [T, D] positional embeddings.
    pub pos: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_ln_gamma: Tensor<S>,
    pub final_ln_beta: Tensor<S>,
    /// [E, D] output projection.
    pub proj: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S: Scalar> {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel<S: Scalar> {
    pub image: Encoder<S>,
    pub text: Encoder<S>,
    /// Scalar; exp() is the reciprocal temperature, clamped to (0, 100].
    pub log_logit_scale: Tensor<S>,
}

fn normal_tensor<S: Scalar>(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &rng.normal_vec(n, std)).unwrap()
}

impl<S: Scalar> EncoderWeights<S> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let f = cfg.ffn_dim();
        let t = cfg.input.token_count();
        let wstd = 1.0 / (d as f64).sqrt();
        let embed = match cfg.input {
            InputSpec::Text { vocab, .. } => normal_tensor(rng, vec![vocab, d], 0.02),
            InputSpec::Image { .. } => {
                normal_tensor(rng, vec![cfg.input.patch_dim().unwrap(), d], wstd)
            }
        };
        let cls = match cfg.input {
            InputSpec::Image { .. } => Some(normal_tensor(rng, vec![d], 0.02)),
            InputSpec::Text { .. } => None,
        };
        let pos = normal_tensor(rng, vec![t, d], 0.01);
        let mut layers = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            layers.push(LayerWeights {
                wq: normal_tensor(rng, vec![d, d], wstd),
                wk: normal_tensor(rng, vec![d, d], wstd),
                wv: normal_tensor(rng, vec![d, d], wstd),
                wo: normal_tensor(rng, vec![d, d], wstd),
                bq: Tensor::zeros(vec![d]),
                bk: Tensor::zeros(vec![d]),
                bv: Tensor::zeros(vec![d]),
                bo: Tensor::zeros(vec![d]),
                w_fc1: normal_tensor(rng, vec![f, d], wstd),
                b_fc1: Tensor::zeros(vec![f]),
                w_fc2: normal_tensor(rng, vec![d, f], 1.0 / (f as f64).sqrt()),
                b_fc2: Tensor::zeros(vec![d]),
                ln1_gamma: Tensor::full(vec![d], S::one()),
                ln1_beta: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::full(vec![d], S::one()),
                ln2_beta: Tensor::zeros(vec![d]),
            });
        }
        Ok(EncoderWeights {
            embed,
            cls,
            pos,
            layers,
            final_ln_gamma: Tensor::full(vec![d], S::one()),
            final_ln_beta: Tensor::zeros(vec![d]),
            proj: normal_tensor(rng, vec![cfg.embed_dim, d], wstd),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        out.push(("embed".into(), &self.embed));
        if let Some(cls) = &self.cls {
            out.push(("cls".into(), cls));
        }
        out.push(("pos".into(), &self.pos));
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("bq", &l.bq),
                ("bk", &l.bk),
                ("bv", &l.bv),
                ("bo", &l.bo),
                ("w_fc1", &l.w_fc1),
                ("b_fc1", &l.b_fc1),
                ("w_fc2", &l.w_fc2),
                ("b_fc2", &l.b_fc2),
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln_gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln_beta".into(), &self.final_ln_beta));
        out.push(("proj".into(), &self.proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        out.push(("embed".into(), &mut self.embed));
        if let Some(cls) = &mut self.cls {
            out.push(("cls".into(), cls));
        }
        out.push(("pos".into(), &mut self.pos));
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("bq", &mut l.bq),
                ("bk", &mut l.bk),
                ("bv", &mut l.bv),
                ("bo", &mut l.bo),
                ("w_fc1", &mut l.w_fc1),
                ("b_fc1", &mut l.b_fc1),
                ("w_fc2", &mut l.w_fc2),
                ("b_fc2", &mut l.b_fc2),
                ("ln1_gamma", &mut l.ln1_gamma),
                ("ln1_beta", &mut l.ln1_beta),
                ("ln2_gamma", &mut l.ln2_gamma),
                ("ln2_beta", &mut l.ln2_beta),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln_gamma".into(), &mut self.final_ln_gamma));
        out.push(("final_ln_beta".into(), &mut self.final_ln_beta));
        out.push(("proj".into(), &mut self.proj));
        out
    }

    /// Every shape is determined by the config; checked on load.
    pub fn validate_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.width;
        let f = cfg.ffn_dim();
        let t = cfg.input.token_count();
        let check = |name: &str, tensor: &Tensor<S>, want: &[usize]| -> Result<()> {
            if tensor.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "EncoderWeights::validate_shapes",
                    detail: format!("{name}: got {:?}, want {want:?}", tensor.shape()),
                });
            }
            Ok(())
        };
        match cfg.input {
            InputSpec::Text { vocab, .. } => {
                check("embed", &self.embed, &[vocab, d])?;
                if self.cls.is_some() {
                    return Err(Error::Contract {
                        op: "EncoderWeights::validate_shapes",
                        detail: "text tower must not carry a CLS embedding".into(),
                    });
                }
            }
            InputSpec::Image { .. } => {
                check("embed", &self.embed, &[cfg.input.patch_dim().unwrap(), d])?;
                match &self.cls {
                    Some(cls) => check("cls", cls, &[d])?,
                    None => {
                        return Err(Error::Contract {
                            op: "EncoderWeights::validate_shapes",
                            detail: "image tower requires a CLS embedding".into(),
                        })
                    }
                }
            }
        }
        check("pos", &self.pos, &[t, d])?;
        if self.layers.len() != cfg.depth {
            return Err(Error::ShapeMismatch {
                op: "EncoderWeights::validate_shapes",
                detail: format!("{} layers, config says {}", self.layers.len(), cfg.depth),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (n, w) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                check(&format!("layers.{i}.{n}"), w, &[d, d])?;
            }
            for (n, b) in [("bq", &l.bq), ("bk", &l.bk), ("bv", &l.bv), ("bo", &l.bo)] {
                check(&format!("layers.{i}.{n}"), b, &[d])?;
            }
            check(&format!("layers.{i}.w_fc1"), &l.w_fc1, &[f, d])?;
            check(&format!("layers.{i}.b_fc1"), &l.b_fc1, &[f])?;
            check(&format!("layers.{i}.w_fc2"), &l.w_fc2, &[d, f])?;
            check(&format!("layers.{i}.b_fc2"), &l.b_fc2, &[d])?;
            for (n, v) in [
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
            ] {
                check(&format!("layers.{i}.{n}"), v, &[d])?;
            }
        }
        check("final_ln_gamma", &self.final_ln_gamma, &[d])?;
        check("final_ln_beta", &self.final_ln_beta, &[d])?;
        check("proj", &self.proj, &[cfg.embed_dim, d])?;
        Ok(())
    }
}

impl<S: Scalar> ClipModel<S> {
    /// Seeded random initialization; `logit_scale` is the reciprocal temperature.
    pub fn init(
        image_cfg: EncoderConfig,
        text_cfg: EncoderConfig,
        logit_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(logit_scale > 0.0 && logit_scale <= MAX_LOGIT_SCALE) {
            return Err(Error::Contract {
                op: "ClipModel::init",
                detail: format!("logit scale {logit_scale} outside (0, {MAX_LOGIT_SCALE}]"),
            });
        }
        let mut img_rng = Rng::substream(seed, "model.img");
        let mut txt_rng = Rng::substream(seed, "model.txt");
        Ok(ClipModel {
            image: Encoder {
                config: image_cfg,
                weights: EncoderWeights::init(&image_cfg, &mut img_rng)?,
            },
            text: Encoder {
                config: text_cfg,
                weights: EncoderWeights::init(&text_cfg, &mut txt_rng)?,
            },
            log_logit_scale: Tensor::scalar(S::from_f64(logit_scale.ln())),
        })
    }

    pub fn logit_scale(&self) -> S {
        self.log_logit_scale.scalar_value().exp()
    }

    /// Keep exp(log_logit_scale) inside (0, 100].
    pub fn clamp_logit_scale(&mut self) {
        let cap = S::from_f64(MAX_LOGIT_SCALE.ln());
        let v = self.log_logit_scale.scalar_value();
        if v > cap {
            self.log_logit_scale = Tensor::scalar(cap);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        for (n, t) in self.image.weights.named_tensors() {
            out.push((format!("img.{n}"), t));
        }
        for (n, t) in self.text.weights.named_tensors() {
            out.push((format!("txt.{n}"), t));
        }
        out.push(("logit_scale".into(), &self.log_logit_scale));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (n, t) in self.image.weights.named_tensors_mut() {
            out.push((format!("img.{n}"), t));
        }
        for (n, t) in self.text.weights.named_tensors_mut() {
            out.push((format!("txt.{n}"), t));
        }
        out.push(("logit_scale".into(), &mut self.log_logit_scale));
        out
    }

    /// Combined checksum over every weight tensor; frozen-teacher witness.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in self.named_tensors() {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= t.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// (image params, text params, total incl. logit scale).
    pub fn param_counts(&self) -> (usize, usize, usize) {
        let img: usize = self
            .image
            .weights
            .named_tensors()
            .iter()
            .map(|(_, t)| t.numel())
            .sum();
        let txt: usize = self
            .text
            .weights
            .named_tensors()
            .iter()
            .map(|(_, t)| t.numel())
            .sum();
        (img, txt, img + txt + 1)
    }
}

// ── tape-staged weights and forward pass ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub bq: NodeId,
    pub bk: NodeId,
    pub bv: NodeId,
    pub bo: NodeId,
    pub w_fc1: NodeId,
    pub b_fc1: NodeId,
    pub w_fc2: NodeId,
    pub b_fc2: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

#[derive(Debug, Clone)]
pub struct EncoderNodes {
    pub embed: NodeId,
    pub cls: Option<NodeId>,
    pub pos: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_ln_gamma: NodeId,
    pub final_ln_beta: NodeId,
    pub proj: NodeId,
}

impl EncoderNodes {
    /// Put every weight tensor on the tape, as grad leaves or constants.
    pub fn stage<S: Scalar>(
        tape: &mut Tape<S>,
        w: &EncoderWeights<S>,
        requires_grad: bool,
    ) -> Self {
        let mut l = |t: &Tensor<S>| tape.leaf(t.clone(), requires_grad);
        EncoderNodes {
            embed: l(&w.embed),
            cls: w.cls.as_ref().map(&mut l),
            pos: l(&w.pos),
            layers: w
                .layers
                .iter()
                .map(|lw| LayerNodes {
                    wq: l(&lw.wq),
                    wk: l(&lw.wk),
                    wv: l(&lw.wv),
                    wo: l(&lw.wo),
                    bq: l(&lw.bq),
                    bk: l(&lw.bk),
                    bv: l(&lw.bv),
                    bo: l(&lw.bo),
                    w_fc1: l(&lw.w_fc1),
                    b_fc1: l(&lw.b_fc1),
                    w_fc2: l(&lw.w_fc2),
                    b_fc2: l(&lw.b_fc2),
                    ln1_gamma: l(&lw.ln1_gamma),
                    ln1_beta: l(&lw.ln1_beta),
                    ln2_gamma: l(&lw.ln2_gamma),
                    ln2_beta: l(&lw.ln2_beta),
                })
                .collect(),
            final_ln_gamma: l(&w.final_ln_gamma),
            final_ln_beta: l(&w.final_ln_beta),
            proj: l(&w.proj),
        }
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embed];
        if let Some(c) = self.cls {
            out.push(c);
        }
        out.push(self.pos);
        for l in &self.layers {
            out.extend([
                l.wq, l.wk, l.wv, l.wo, l.bq, l.bk, l.bv, l.bo, l.w_fc1, l.b_fc1, l.w_fc2,
                l.b_fc2, l.ln1_gamma, l.ln1_beta, l.ln2_gamma, l.ln2_beta,
            ]);
        }
        out.extend([self.final_ln_gamma, self.final_ln_beta, self.proj]);
        out
    }

    /// Read staged values back into a weight struct (used to materialize a
    /// student built on-tape from mapping parameters).
    pub fn extract<S: Scalar>(&self, tape: &Tape<S>) -> EncoderWeights<S> {
        EncoderWeights {
            embed: tape.value(self.embed).clone(),
            cls: self.cls.map(|c| tape.value(c).clone()),
            pos: tape.value(self.pos).clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: tape.value(l.wq).clone(),
                    wk: tape.value(l.wk).clone(),
                    wv: tape.value(l.wv).clone(),
                    wo: tape.value(l.wo).clone(),
                    bq: tape.value(l.bq).clone(),
                    bk: tape.value(l.bk).clone(),
                    bv: tape.value(l.bv).clone(),
                    bo: tape.value(l.bo).clone(),
                    w_fc1: tape.value(l.w_fc1).clone(),
                    b_fc1: tape.value(l.b_fc1).clone(),
                    w_fc2: tape.value(l.w_fc2).clone(),
                    b_fc2: tape.value(l.b_fc2).clone(),
                    ln1_gamma: tape.value(l.ln1_gamma).clone(),
                    ln1_beta: tape.value(l.ln1_beta).clone(),
                    ln2_gamma: tape.value(l.ln2_gamma).clone(),
                    ln2_beta: tape.value(l.ln2_beta).clone(),
                })
                .collect(),
            final_ln_gamma: tape.value(self.final_ln_gamma).clone(),
            final_ln_beta: tape.value(self.final_ln_beta).clone(),
            proj: tape.value(self.proj).clone(),
        }
    }
}

/// A batch of padded token sequences. `lens[b]` counts the meaningful tokens
/// (through the EOS position); keys beyond it are masked and the pooled
/// hidden state is taken at position `lens[b] - 1`.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<Vec<usize>>,
    pub lens: Vec<usize>,
}

/// A batch of patch grids, flattened to [B, patches, patch_dim].
#[derive(Debug, Clone)]
pub struct ImageBatch<S: Scalar> {
    pub pixels: Tensor<S>,
}

fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    x2d: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let wt = tape.transpose_last2(w)?;
    let y = tape.matmul(x2d, wt)?;
    tape.add_bias(y, b)
}

fn split_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    bsz: usize,
    t: usize,
    h: usize,
    dh: usize,
) -> Result<NodeId> {
    let r = tape.reshape(x, vec![bsz, t, h, dh])?;
    let p = tape.permute(r, vec![0, 2, 1, 3])?;
    tape.reshape(p, vec![bsz * h, t, dh])
}

fn merge_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    bsz: usize,
    t: usize,
    h: usize,
    dh: usize,
) -> Result<NodeId> {
    let r = tape.reshape(x, vec![bsz, h, t, dh])?;
    let p = tape.permute(r, vec![0, 2, 1, 3])?;
    tape.reshape(p, vec![bsz * t, h * dh])
}

/// Shared trunk: embedded sequence -> pooled, projected, unit-norm embedding.
///
/// `x` is [B, T, D] (already embedded, before positional add), `mask` an
/// optional [B*H, T, T] additive attention mask, `pool` the flat row index
/// (b*T + position) to pool per batch element.
fn encode_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    nodes: &EncoderNodes,
    x: NodeId,
    mask: Option<NodeId>,
    pool: Vec<usize>,
) -> Result<NodeId> {
    let d = cfg.width;
    let h = cfg.heads;
    let dh = d / h;
    let shape = tape.value(x).shape().to_vec();
    let (bsz, t) = (shape[0], shape[1]);
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let mut x = tape.add_bcast0(x, nodes.pos)?;
    for l in &nodes.layers {
        // attention sublayer, pre-norm
        let hn = tape.layer_norm(x, l.ln1_gamma, l.ln1_beta, S::from_f64(1e-5))?;
        let h2d = tape.reshape(hn, vec![bsz * t, d])?;
        let q = linear(tape, h2d, l.wq, l.bq)?;
        let k = linear(tape, h2d, l.wk, l.bk)?;
        let v = linear(tape, h2d, l.wv, l.bv)?;
        let qh = split_heads(tape, q, bsz, t, h, dh)?;
        let kh = split_heads(tape, k, bsz, t, h, dh)?;
        let vh = split_heads(tape, v, bsz, t, h, dh)?;
        let kt = tape.transpose_last2(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.scale_const(scores, scale);
        let scores = match mask {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let probs = tape.softmax_last(scores);
        let ctx = tape.bmm(probs, vh)?;
        let merged = merge_heads(tape, ctx, bsz, t, h, dh)?;
        let attn_out = linear(tape, merged, l.wo, l.bo)?;
        let attn3d = tape.reshape(attn_out, vec![bsz, t, d])?;
        x = tape.add(x, attn3d)?;

        // feed-forward sublayer, pre-norm
        let hn2 = tape.layer_norm(x, l.ln2_gamma, l.ln2_beta, S::from_f64(1e-5))?;
        let h2d2 = tape.reshape(hn2, vec![bsz * t, d])?;
        let f1 = linear(tape, h2d2, l.w_fc1, l.b_fc1)?;
        let g = tape.gelu(f1);
        let f2 = linear(tape, g, l.w_fc2, l.b_fc2)?;
        let f3d = tape.reshape(f2, vec![bsz, t, d])?;
        x = tape.add(x, f3d)?;
    }
    let xn = tape.layer_norm(x, nodes.final_ln_gamma, nodes.final_ln_beta, S::from_f64(1e-5))?;
    let flat = tape.reshape(xn, vec![bsz * t, d])?;
    let pooled = tape.gather_rows(flat, pool)?;
    let pt = tape.transpose_last2(nodes.proj)?;
    let emb = tape.matmul(pooled, pt)?;
    tape.row_l2_normalize(emb)
}

/// Text tower forward: [B, E] unit-norm embeddings.
pub fn encode_text_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    nodes: &EncoderNodes,
    batch: &TextBatch,
) -> Result<NodeId> {
    let (vocab, seq_len) = match cfg.input {
        InputSpec::Text { vocab, seq_len } => (vocab, seq_len),
        _ => {
            return Err(Error::Contract {
                op: "encode_text",
                detail: "config is not a text tower".into(),
            })
        }
    };
    let bsz = batch.ids.len();
    if batch.lens.len() != bsz {
        return Err(Error::Contract {
            op: "encode_text",
            detail: format!("{bsz} sequences but {} lens", batch.lens.len()),
        });
    }
    let mut flat = Vec::with_capacity(bsz * seq_len);
    for (b, seq) in batch.ids.iter().enumerate() {
        if seq.len() != seq_len {
            return Err(Error::Contract {
                op: "encode_text",
                detail: format!("sequence {b} has length {}, expected {seq_len}", seq.len()),
            });
        }
        if batch.lens[b] == 0 || batch.lens[b] > seq_len {
            return Err(Error::Contract {
                op: "encode_text",
                detail: format!("sequence {b} has invalid len {}", batch.lens[b]),
            });
        }
        for &id in seq {
            if id >= vocab {
                return Err(Error::Contract {
                    op: "encode_text",
                    detail: format!("token id {id} out of range for vocab {vocab}"),
                });
            }
            flat.push(id);
        }
    }
    let emb2d = tape.gather_rows(nodes.embed, flat)?;
    let x = tape.reshape(emb2d, vec![bsz, seq_len, cfg.width])?;

    // Additive key mask: positions at or past lens[b] never receive attention,
    // which makes the output invariant to padding content.
    let neg = S::from_f64(-1e30);
    let mut mdata = vec![S::zero(); bsz * cfg.heads * seq_len * seq_len];
    for b in 0..bsz {
        let len = batch.lens[b];
        for hh in 0..cfg.heads {
            let base = (b * cfg.heads + hh) * seq_len * seq_len;
            for qpos in 0..seq_len {
                for kpos in len..seq_len {
                    mdata[base + qpos * seq_len + kpos] = neg;
                }
            }
        }
    }
    let mask = tape.constant(Tensor::new(
        vec![bsz * cfg.heads, seq_len, seq_len],
        mdata,
    )?);
    let pool = (0..bsz).map(|b| b * seq_len + (batch.lens[b] - 1)).collect();
    encode_sequence(tape, cfg, nodes, x, Some(mask), pool)
}

/// Image tower forward: [B, E] unit-norm embeddings, pooled at CLS.
pub fn encode_image_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    nodes: &EncoderNodes,
    batch: &ImageBatch<S>,
) -> Result<NodeId> {
    let grid = match cfg.input {
        InputSpec::Image { grid, .. } => grid,
        _ => {
            return Err(Error::Contract {
                op: "encode_image",
                detail: "config is not an image tower".into(),
            })
        }
    };
    let pd = cfg.input.patch_dim().unwrap();
    let patches = grid * grid;
    let shape = batch.pixels.shape().to_vec();
    if shape.len() != 3 || shape[1] != patches || shape[2] != pd {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            detail: format!("pixels {shape:?}, expected [B, {patches}, {pd}]"),
        });
    }
    let bsz = shape[0];
    let px = tape.constant(batch.pixels.clone());
    let px2d = tape.reshape(px, vec![bsz * patches, pd])?;
    let pe = tape.matmul(px2d, nodes.embed)?; // embed is [pd, D]
    let p3d = tape.reshape(pe, vec![bsz, patches, cfg.width])?;
    let cls = nodes.cls.ok_or(Error::Contract {
        op: "encode_image",
        detail: "image tower weights missing CLS".into(),
    })?;
    let cls_row = tape.reshape(cls, vec![1, cfg.width])?;
    let cls_b = tape.tile_axis0(cls_row, bsz)?; // [B, 1, D]
    let x = tape.concat_axis1(cls_b, p3d)?; // CLS first
    let pool = (0..bsz).map(|b| b * (patches + 1)).collect();
    encode_sequence(tape, cfg, nodes, x, None, pool)
}

/// Scaled similarity logits: (I2T, T2I) where T2I = I2Tᵀ.
pub fn clip_logits_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    img_emb: NodeId,
    txt_emb: NodeId,
    scale: NodeId,
) -> Result<(NodeId, NodeId)> {
    if tape.value(scale).scalar_value() <= S::zero() {
        return Err(Error::Contract {
            op: "clip_logits",
            detail: "scale must be positive".into(),
        });
    }
    let tt = tape.transpose_last2(txt_emb)?;
    let sim = tape.matmul(img_emb, tt)?;
    let i2t = tape.scale_by_scalar(sim, scale)?;
    let t2i = tape.transpose_last2(i2t)?;
    Ok((i2t, t2i))
}

/// Forward-only convenience: text embeddings as a plain tensor.
pub fn encode_text<S: Scalar>(model: &ClipModel<S>, batch: &TextBatch) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::stage(&mut tape, &model.text.weights, false);
    let out = encode_text_nodes(&mut tape, &model.text.config, &nodes, batch)?;
    Ok(tape.value(out).clone())
}

/// Forward-only convenience: image embeddings as a plain tensor.
pub fn encode_image<S: Scalar>(model: &ClipModel<S>, batch: &ImageBatch<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::stage(&mut tape, &model.image.weights, false);
    let out = encode_image_nodes(&mut tape, &model.image.config, &nodes, batch)?;
    Ok(tape.value(out).clone())
}

/// Forward-only similarity logits from plain embedding tensors.
pub fn clip_logits<S: Scalar>(
    img_emb: &Tensor<S>,
    txt_emb: &Tensor<S>,
    scale: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if scale <= S::zero() {
        return Err(Error::Contract {
            op: "clip_logits",
            detail: "scale must be positive".into(),
        });
    }
    let (b1, e1) = img_emb.dims2()?;
    let (b2, e2) = txt_emb.dims2()?;
    if e1 != e2 || b1 != b2 {
        return Err(Error::ShapeMismatch {
            op: "clip_logits",
            detail: format!("img {:?} vs txt {:?}", img_emb.shape(), txt_emb.shape()),
        });
    }
    let txt_t = crate::tensor::transpose(txt_emb.data(), b2, e2);
    let mut sim = crate::tensor::matmul(img_emb.data(), &txt_t, b1, e1, b2);
    for v in sim.iter_mut() {
        *v = *v * scale;
    }
    let i2t = Tensor::new(vec![b1, b2], sim)?;
    let t2i = Tensor::new(
        vec![b2, b1],
        crate::tensor::transpose(i2t.data(), b1, b2),
    )?;
    Ok((i2t, t2i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_cfg() -> EncoderConfig {
        EncoderConfig {
            width: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 4,
            embed_dim: 6,
            input: InputSpec::Text { vocab: 11, seq_len: 5 },
        }
    }

    fn image_cfg() -> EncoderConfig {
        EncoderConfig {
            width: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 4,
            embed_dim: 6,
            input: InputSpec::Image { grid: 2, patch: 2, channels: 1 },
        }
    }

    fn small_model() -> ClipModel<f64> {
        ClipModel::init(image_cfg(), text_cfg(), 50.0, 42).unwrap()
    }

    // ── independent scalar-loop reference forward ────────────────────────────

    fn naive_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
    }

    fn naive_ln(row: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) * rstd * g[j] + b[j])
            .collect()
    }

    fn naive_linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (rows, cols) = w.dims2().unwrap();
        assert_eq!(cols, x.len());
        (0..rows)
            .map(|i| {
                (0..cols).map(|j| w.get2(i, j) * x[j]).sum::<f64>() + b.data()[i]
            })
            .collect()
    }

    /// Per-example transformer forward written with plain scalar loops; the
    /// oracle the tape-based encoder is checked against.
    fn naive_encode(
        cfg: &EncoderConfig,
        w: &EncoderWeights<f64>,
        mut x: Vec<Vec<f64>>, // [T][D], embedded, before positional add
        valid_len: usize,     // keys >= valid_len are masked (T for images)
        pool: usize,
    ) -> Vec<f64> {
        let t = x.len();
        let d = cfg.width;
        let h = cfg.heads;
        let dh = d / h;
        for (ti, row) in x.iter_mut().enumerate() {
            for j in 0..d {
                row[j] += w.pos.get2(ti, j);
            }
        }
        for l in &w.layers {
            let hn: Vec<Vec<f64>> = x
                .iter()
                .map(|r| naive_ln(r, l.ln1_gamma.data(), l.ln1_beta.data()))
                .collect();
            let q: Vec<Vec<f64>> = hn.iter().map(|r| naive_linear(r, &l.wq, &l.bq)).collect();
            let k: Vec<Vec<f64>> = hn.iter().map(|r| naive_linear(r, &l.wk, &l.bk)).collect();
            let v: Vec<Vec<f64>> = hn.iter().map(|r| naive_linear(r, &l.wv, &l.bv)).collect();
            let mut ctx = vec![vec![0.0; d]; t];
            for head in 0..h {
                let o = head * dh;
                for qi in 0..t {
                    let mut scores: Vec<f64> = (0..valid_len)
                        .map(|ki| {
                            (0..dh).map(|c| q[qi][o + c] * k[ki][o + c]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for ki in 0..valid_len {
                        for c in 0..dh {
                            ctx[qi][o + c] += scores[ki] / z * v[ki][o + c];
                        }
                    }
                }
            }
            for qi in 0..t {
                let out = naive_linear(&ctx[qi], &l.wo, &l.bo);
                for j in 0..d {
                    x[qi][j] += out[j];
                }
            }
            for qi in 0..t {
                let hn2 = naive_ln(&x[qi], l.ln2_gamma.data(), l.ln2_beta.data());
                let f1: Vec<f64> = naive_linear(&hn2, &l.w_fc1, &l.b_fc1)
                    .into_iter()
                    .map(naive_gelu)
                    .collect();
                let f2 = naive_linear(&f1, &l.w_fc2, &l.b_fc2);
                for j in 0..d {
                    x[qi][j] += f2[j];
                }
            }
        }
        let pooled = naive_ln(&x[pool], w.final_ln_gamma.data(), w.final_ln_beta.data());
        let emb = naive_linear(&pooled, &w.proj, &Tensor::zeros(vec![cfg.embed_dim]));
        let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        emb.into_iter().map(|v| v / norm).collect()
    }

    fn sample_text_batch() -> TextBatch {
        TextBatch {
            ids: vec![
                vec![1, 4, 7, 2, 0],
                vec![1, 9, 2, 0, 0],
                vec![1, 5, 6, 10, 2],
            ],
            lens: vec![4, 3, 5],
        }
    }

    #[test]
    fn text_forward_matches_scalar_reference() {
        let m = small_model();
        let batch = sample_text_batch();
        let got = encode_text(&m, &batch).unwrap();
        assert_eq!(got.shape(), &[3, 6]);
        let w = &m.text.weights;
        for (b, seq) in batch.ids.iter().enumerate() {
            let x: Vec<Vec<f64>> = seq
                .iter()
                .map(|&id| (0..8).map(|j| w.embed.get2(id, j)).collect())
                .collect();
            let want = naive_encode(&m.text.config, w, x, batch.lens[b], batch.lens[b] - 1);
            for j in 0..6 {
                assert!(
                    (got.get2(b, j) - want[j]).abs() <= 1e-9,
                    "row {b} col {j}: {} vs {}",
                    got.get2(b, j),
                    want[j]
                );
            }
        }
    }

    #[test]
    fn image_forward_matches_scalar_reference() {
        let m = small_model();
        let mut rng = Rng::from_seed(9);
        let bsz = 2;
        let pixels = Tensor::from_f64(vec![bsz, 4, 4], &rng.normal_vec(bsz * 4 * 4, 1.0)).unwrap();
        let batch = ImageBatch { pixels: pixels.clone() };
        let got = encode_image(&m, &batch).unwrap();
        let w = &m.image.weights;
        for b in 0..bsz {
            // CLS row then projected patches.
            let mut x = vec![w.cls.as_ref().unwrap().data().to_vec()];
            for p in 0..4 {
                x.push(
                    (0..8)
                        .map(|j| {
                            (0..4)
                                .map(|c| pixels.data()[(b * 4 + p) * 4 + c] * w.embed.get2(c, j))
                                .sum::<f64>()
                        })
                        .collect(),
                );
            }
            let want = naive_encode(&m.image.config, w, x, 5, 0);
            for j in 0..6 {
                assert!(
                    (got.get2(b, j) - want[j]).abs() <= 1e-9,
                    "row {b} col {j}: {} vs {}",
                    got.get2(b, j),
                    want[j]
                );
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = small_model();
        let got = encode_text(&m, &sample_text_batch()).unwrap();
        for b in 0..3 {
            let n: f64 = (0..6).map(|j| got.get2(b, j) * got.get2(b, j)).sum();
            assert!((n.sqrt() - 1.0).abs() <= 1e-9, "row {b} norm {}", n.sqrt());
        }
    }

    #[test]
    fn padding_content_does_not_affect_output() {
        let m = small_model();
        let a = TextBatch { ids: vec![vec![1, 9, 2, 0, 0]], lens: vec![3] };
        let b = TextBatch { ids: vec![vec![1, 9, 2, 8, 4]], lens: vec![3] };
        let ea = encode_text(&m, &a).unwrap();
        let eb = encode_text(&m, &b).unwrap();
        assert!(ea.max_abs_diff(&eb) <= 1e-12);
    }

    #[test]
    fn batch_composition_does_not_affect_rows() {
        let m = small_model();
        let full = encode_text(&m, &sample_text_batch()).unwrap();
        let solo = encode_text(
            &m,
            &TextBatch { ids: vec![vec![1, 9, 2, 0, 0]], lens: vec![3] },
        )
        .unwrap();
        for j in 0..6 {
            assert!((full.get2(1, j) - solo.get2(0, j)).abs() <= 1e-12);
        }
    }

    #[test]
    fn clip_logits_transpose_and_scale() {
        let m = small_model();
        let txt = encode_text(&m, &sample_text_batch()).unwrap();
        let mut rng = Rng::from_seed(4);
        let pixels = Tensor::from_f64(vec![3, 4, 4], &rng.normal_vec(48, 1.0)).unwrap();
        let img = encode_image(&m, &ImageBatch { pixels }).unwrap();
        let (i2t, t2i) = clip_logits(&img, &txt, m.logit_scale()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(i2t.get2(i, j), t2i.get2(j, i));
                // unit vectors, scale 50 => |logit| <= 50
                assert!(i2t.get2(i, j).abs() <= 50.0 + 1e-9);
            }
        }
        assert!(clip_logits(&img, &txt, 0.0).is_err());
    }

    #[test]
    fn param_count_closed_form_matches_enumeration() {
        let m = small_model();
        let (img, txt, total) = m.param_counts();
        assert_eq!(img, m.image.config.param_count());
        assert_eq!(txt, m.text.config.param_count());
        assert_eq!(total, img + txt + 1);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ClipModel::<f64>::init(image_cfg(), text_cfg(), 50.0, 7).unwrap();
        let b = ClipModel::<f64>::init(image_cfg(), text_cfg(), 50.0, 7).unwrap();
        let c = ClipModel::<f64>::init(image_cfg(), text_cfg(), 50.0, 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn validate_shapes_catches_truncation() {
        let m = small_model();
        assert!(m.text.weights.validate_shapes(&m.text.config).is_ok());
        let mut bad = m.text.weights.clone();
        bad.layers.pop();
        assert!(bad.validate_shapes(&m.text.config).is_err());
        let mut bad2 = m.text.weights.clone();
        bad2.layers[0].wq = Tensor::zeros(vec![8, 4]);
        assert!(bad2.validate_shapes(&m.text.config).is_err());
    }

    #[test]
    fn rejects_out_of_range_tokens_and_bad_lens() {
        let m = small_model();
        let bad = TextBatch { ids: vec![vec![1, 11, 2, 0, 0]], lens: vec![3] };
        assert!(encode_text(&m, &bad).is_err());
        let bad_len = TextBatch { ids: vec![vec![1, 9, 2, 0, 0]], lens: vec![0] };
        assert!(encode_text(&m, &bad_len).is_err());
        let bad_cfg = EncoderConfig { heads: 3, ..text_cfg() };
        assert!(bad_cfg.validate().is_err());
    }

    #[test]
    fn gradients_flow_to_every_weight() {
        let m = small_model();
        let mut tape = Tape::new();
        let nodes = EncoderNodes::stage(&mut tape, &m.text.weights, true);
        let emb = encode_text_nodes(&mut tape, &m.text.config, &nodes, &sample_text_batch())
            .unwrap();
        let root = tape.sum_all(emb);
        tape.backward(root).unwrap();
        for id in nodes.node_ids() {
            let g = tape.grad(id).expect("missing grad");
            assert!(g.all_finite());
        }
    }
}

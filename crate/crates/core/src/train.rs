//! Two-stage compression training.
//!
//! Stage 1 (mapping): the teacher is frozen; every step rebuilds the student
//! differentiably from the current mapping parameters, forwards a batch, and
//! updates only the maps against the contrastive task loss.
//!
//! Stage 2 (retraining): the student is materialized; all its weights train
//! against (1−λ)·task + λ·distillation from the frozen teacher. Teacher
//! embeddings are precomputed once per run — the data is deterministic per
//! index, so cached embeddings are exactly what a fresh forward would give.
//!
//! Optimizer: AdamW with decoupled weight decay, linear-warmup + cosine-decay
//! schedule, and global gradient-norm clipping.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

// required in no_std builds, where f64 inherent math is unavailable
#[allow(unused_imports)]
use num_traits::Float;

use crate::compress::{build_tower_nodes, ClipMaps, CompressionSpec, TowerMapNodes};
use crate::data::{batch_indices, make_batch, Split, SplitTable, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{
    clip_logits, clip_logits_nodes, encode_image, encode_image_nodes, encode_text,
    encode_text_nodes, ClipModel, EncoderNodes, ImageBatch, TextBatch,
};
use crate::scalar::Scalar;
use crate::tape::{softmax_rows, NodeId, Tape};
use crate::tensor::Tensor;

// ── configuration ────────────────────────────────────────────────────────────

/// λ-weighting between the hard task loss and the soft distillation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Contract {
                op: "LossWeights",
                detail: format!("lambda {lambda} outside [0, 1]"),
            });
        }
        Ok(LossWeights { lambda })
    }
}

impl Default for LossWeights {
    /// λ = 1: pure distillation.
    fn default() -> Self {
        LossWeights { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Pretraining,
    Mapping,
    Retraining,
}

impl StageKind {
    pub fn label(&self) -> &'static str {
        match self {
            StageKind::Pretraining => "pretrain",
            StageKind::Mapping => "map",
            StageKind::Retraining => "retrain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub stage: StageKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl StageConfig {
    /// Desk-scale mapping-stage defaults.
    pub fn mapping_default(seed: u64) -> Self {
        StageConfig {
            stage: StageKind::Mapping,
            steps: 500,
            batch: 64,
            lr: 1e-3,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup: 50,
            clip_norm: 5.0,
            seed,
        }
    }

    /// Desk-scale retraining-stage defaults.
    pub fn retraining_default(seed: u64) -> Self {
        StageConfig {
            stage: StageKind::Retraining,
            steps: 2000,
            warmup: 200,
            lr: 3e-4,
            ..Self::mapping_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup >= self.steps {
            return Err(Error::Contract {
                op: "StageConfig",
                detail: format!("warmup {} must be < steps {}", self.warmup, self.steps),
            });
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Contract {
                op: "StageConfig",
                detail: format!("clip_norm {} must be > 0", self.clip_norm),
            });
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Contract {
                op: "StageConfig",
                detail: "batch and lr must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Linear warmup 0→base over `warmup` steps, then cosine decay base→0 over
/// the remainder. lr(0) = 0, lr(warmup) = base, lr(steps) = 0.
pub fn lr_at(step: usize, cfg: &StageConfig) -> f64 {
    if cfg.warmup > 0 && step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup) as f64;
    if span <= 0.0 {
        return cfg.lr;
    }
    let progress = (step - cfg.warmup) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (core::f64::consts::PI * progress.min(1.0)).cos())
}

// ── optimizer ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    pub step: usize,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        OptimState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }
}

/// Euclidean norm over the concatenation of all gradients.
pub fn global_grad_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_gradients<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// One AdamW update. Weight decay is decoupled: `p -= lr·wd·p` is applied
/// before the bias-corrected moment step lands.
pub fn adamw_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut OptimState<S>,
    lr: f64,
    cfg: &StageConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract {
            op: "adamw_step",
            detail: format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t));
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(cfg.eps);
    let decay = S::from_f64(lr * cfg.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *pv = *pv - decay * *pv;
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv - lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── losses ───────────────────────────────────────────────────────────────────

fn eye<S: Scalar>(n: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.set2(i, i, S::one());
    }
    t
}

/// Symmetric InfoNCE on the tape: mean CE against diagonal labels in both
/// directions, summed.
pub fn clip_task_loss_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    i2t: NodeId,
    t2i: NodeId,
) -> Result<NodeId> {
    let (r, c) = tape.value(i2t).dims2()?;
    if r != c {
        return Err(Error::Contract {
            op: "clip_task_loss",
            detail: format!("logits must be square, got {:?}", tape.value(i2t).shape()),
        });
    }
    let labels = tape.constant(eye(r));
    let a = tape.cross_entropy_soft(i2t, labels)?;
    let b = tape.cross_entropy_soft(t2i, labels)?;
    tape.add(a, b)
}

/// Soft logit distillation on the tape: targets are row softmaxes of the
/// (detached) teacher logits, both directions summed.
pub fn distill_loss_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    s_i2t: NodeId,
    s_t2i: NodeId,
    t_i2t: &Tensor<S>,
    t_t2i: &Tensor<S>,
) -> Result<NodeId> {
    if tape.value(s_i2t).shape() != t_i2t.shape() || tape.value(s_t2i).shape() != t_t2i.shape() {
        return Err(Error::Contract {
            op: "distill_loss",
            detail: format!(
                "student {:?}/{:?} vs teacher {:?}/{:?}",
                tape.value(s_i2t).shape(),
                tape.value(s_t2i).shape(),
                t_i2t.shape(),
                t_t2i.shape()
            ),
        });
    }
    let ta = tape.constant(softmax_rows(t_i2t));
    let tb = tape.constant(softmax_rows(t_t2i));
    let a = tape.cross_entropy_soft(s_i2t, ta)?;
    let b = tape.cross_entropy_soft(s_t2i, tb)?;
    tape.add(a, b)
}

/// (1−λ)·task + λ·soft, with the endpoints returning the operand unchanged so
/// λ ∈ {0, 1} is bit-exact.
pub fn total_loss_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    task: NodeId,
    soft: NodeId,
    w: LossWeights,
) -> Result<NodeId> {
    if w.lambda == 0.0 {
        return Ok(task);
    }
    if w.lambda == 1.0 {
        return Ok(soft);
    }
    let a = tape.scale_const(task, S::from_f64(1.0 - w.lambda));
    let b = tape.scale_const(soft, S::from_f64(w.lambda));
    tape.add(a, b)
}

fn loss_value<S: Scalar>(f: impl FnOnce(&mut Tape<S>) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let node = f(&mut tape)?;
    Ok(tape.value(node).scalar_value().as_f64())
}

/// Plain-value symmetric InfoNCE.
pub fn clip_task_loss<S: Scalar>(i2t: &Tensor<S>, t2i: &Tensor<S>) -> Result<f64> {
    let (a, b) = (i2t.clone(), t2i.clone());
    loss_value(move |tape| {
        let x = tape.constant(a);
        let y = tape.constant(b);
        clip_task_loss_nodes(tape, x, y)
    })
}

/// Plain-value distillation loss.
pub fn distill_loss<S: Scalar>(
    s_i2t: &Tensor<S>,
    s_t2i: &Tensor<S>,
    t_i2t: &Tensor<S>,
    t_t2i: &Tensor<S>,
) -> Result<f64> {
    let (a, b) = (s_i2t.clone(), s_t2i.clone());
    let (ta, tb) = (t_i2t.clone(), t_t2i.clone());
    loss_value(move |tape| {
        let x = tape.constant(a);
        let y = tape.constant(b);
        distill_loss_nodes(tape, x, y, &ta, &tb)
    })
}

/// Plain-value λ-weighted total; endpoints are bit-exact.
pub fn total_loss(task: f64, soft: f64, w: LossWeights) -> f64 {
    if w.lambda == 0.0 {
        task
    } else if w.lambda == 1.0 {
        soft
    } else {
        (1.0 - w.lambda) * task + w.lambda * soft
    }
}

// ── loss log ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogEntry {
    pub step: usize,
    pub stage: StageKind,
    pub lr: f64,
    pub task_loss: f64,
    pub soft_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
}

// ── stage 1: mapping ─────────────────────────────────────────────────────────

fn first_non_finite_name<S: Scalar>(named: &[(String, &Tensor<S>)]) -> Option<String> {
    named
        .iter()
        .find(|(_, t)| !t.all_finite())
        .map(|(n, _)| n.clone())
}

struct MappingForward {
    total: NodeId,
    task: NodeId,
    soft: Option<NodeId>,
    img_maps: TowerMapNodes,
    txt_maps: TowerMapNodes,
}

/// Stage-1 forward: builds the student from the maps on the tape, forwards
/// the batch, and assembles the stage loss.
fn mapping_forward<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &ClipModel<S>,
    spec: &CompressionSpec,
    maps: &ClipMaps<S>,
    img: &ImageBatch<S>,
    txt: &TextBatch,
    requires_grad: bool,
    distill: Option<(&Tensor<S>, &Tensor<S>, LossWeights)>,
) -> Result<MappingForward> {
    let img_maps = TowerMapNodes::stage(tape, &maps.image, requires_grad);
    let txt_maps = TowerMapNodes::stage(tape, &maps.text, requires_grad);
    let img_nodes = build_tower_nodes(tape, &teacher.image.weights, &img_maps)?;
    let txt_nodes = build_tower_nodes(tape, &teacher.text.weights, &txt_maps)?;
    let img_cfg = spec.student_config(&teacher.image.config);
    let txt_cfg = spec.student_config(&teacher.text.config);
    let ie = encode_image_nodes(tape, &img_cfg, &img_nodes, img)?;
    let te = encode_text_nodes(tape, &txt_cfg, &txt_nodes, txt)?;
    let scale = tape.constant(Tensor::scalar(teacher.logit_scale()));
    let (i2t, t2i) = clip_logits_nodes(tape, ie, te, scale)?;
    let task = clip_task_loss_nodes(tape, i2t, t2i)?;
    let (total, soft) = match distill {
        None => (task, None),
        Some((t_i2t, t_t2i, w)) => {
            let soft = distill_loss_nodes(tape, i2t, t2i, t_i2t, t_t2i)?;
            (total_loss_nodes(tape, task, soft, w)?, Some(soft))
        }
    };
    Ok(MappingForward { total, task, soft, img_maps, txt_maps })
}

/// Stage-1 loss for the current maps on one batch (no gradients); the
/// finite-difference oracle evaluates this.
pub fn mapping_stage_loss<S: Scalar>(
    teacher: &ClipModel<S>,
    spec: &CompressionSpec,
    maps: &ClipMaps<S>,
    img: &ImageBatch<S>,
    txt: &TextBatch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = mapping_forward(&mut tape, teacher, spec, maps, img, txt, false, None)?;
    Ok(tape.value(fwd.total).scalar_value().as_f64())
}

/// Stage-1 loss and per-map gradients on one batch, in the order of
/// `ClipMaps::named_tensors`.
pub fn mapping_stage_grads<S: Scalar>(
    teacher: &ClipModel<S>,
    spec: &CompressionSpec,
    maps: &ClipMaps<S>,
    img: &ImageBatch<S>,
    txt: &TextBatch,
) -> Result<(f64, Vec<(String, Tensor<S>)>)> {
    let mut tape = Tape::new();
    let fwd = mapping_forward(&mut tape, teacher, spec, maps, img, txt, true, None)?;
    tape.backward(fwd.total)?;
    let loss_val = tape.value(fwd.total).scalar_value().as_f64();
    let mut out = Vec::new();
    for (prefix, mn) in [("img", &fwd.img_maps), ("txt", &fwd.txt_maps)] {
        for (name, id) in mn.named_nodes() {
            let g = tape
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()));
            out.push((format!("{prefix}.{name}"), g));
        }
    }
    Ok((loss_val, out))
}

/// Train the mapping parameters against the frozen teacher. Returns the
/// trained maps and the per-step loss log. `distill` optionally λ-mixes
/// a distillation term into stage 1 (off by default).
pub fn run_mapping_stage<S: Scalar>(
    teacher: &ClipModel<S>,
    spec: &CompressionSpec,
    mut maps: ClipMaps<S>,
    dspec: &SyntheticSpec,
    table: &SplitTable,
    cfg: &StageConfig,
    distill: Option<LossWeights>,
) -> Result<(ClipMaps<S>, Vec<LossLogEntry>)> {
    cfg.validate()?;
    spec.validate(&teacher.image.config)?;
    spec.validate(&teacher.text.config)?;
    let teacher_sum = teacher.checksum();
    let mut log = Vec::with_capacity(cfg.steps);
    let shapes: Vec<Vec<usize>> = maps
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut opt = OptimState::new(&shapes);
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();

    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = batch_indices(dspec.train_size, cfg.batch, cfg.seed, epoch)?;
            queue.reverse(); // pop from the back in epoch order
            epoch += 1;
        }
        let idx = queue.pop().expect("batch sizes validated");
        let (img, txt) = make_batch::<S>(dspec, table, Split::Train, &idx);

        let mut tape = Tape::new();
        let distill_data = match distill {
            None => None,
            Some(w) => {
                let ie = encode_image(teacher, &img)?;
                let te = encode_text(teacher, &txt)?;
                let (ti, tt) = clip_logits(&ie, &te, teacher.logit_scale())?;
                Some((ti, tt, w))
            }
        };
        let fwd = mapping_forward(
            &mut tape,
            teacher,
            spec,
            &maps,
            &img,
            &txt,
            true,
            distill_data.as_ref().map(|(a, b, w)| (a, b, *w)),
        )?;
        let task_val = tape.value(fwd.task).scalar_value().as_f64();
        let soft_val = fwd
            .soft
            .map_or(f64::NAN, |s| tape.value(s).scalar_value().as_f64());
        let total_val = tape.value(fwd.total).scalar_value().as_f64();
        if !total_val.is_finite() {
            let named = maps.named_tensors();
            let culprit =
                first_non_finite_name(&named).unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite {
                context: format!("mapping step {step}: non-finite loss (parameter {culprit})"),
            });
        }
        tape.backward(fwd.total)?;

        let mut grads: Vec<Tensor<S>> = Vec::with_capacity(shapes.len());
        for mn in [&fwd.img_maps, &fwd.txt_maps] {
            for (name, id) in mn.named_nodes() {
                let g = tape.grad(id).cloned().unwrap_or_else(|| {
                    Tensor::zeros(tape.value(id).shape().to_vec())
                });
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        context: format!("mapping step {step}: non-finite gradient for {name}"),
                    });
                }
                grads.push(g);
            }
        }
        let pre_clip = clip_gradients(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        {
            let mut named = maps.named_tensors_mut();
            let mut params: Vec<&mut Tensor<S>> =
                named.iter_mut().map(|(_, t)| &mut **t).collect();
            adamw_step(&mut params, &grads, &mut opt, lr, cfg)?;
        }
        log.push(LossLogEntry {
            step,
            stage: StageKind::Mapping,
            lr,
            task_loss: task_val,
            soft_loss: soft_val,
            total_loss: total_val,
            grad_norm: pre_clip,
        });
    }

    if teacher.checksum() != teacher_sum {
        return Err(Error::Contract {
            op: "run_mapping_stage",
            detail: "teacher weights changed during the mapping stage".into(),
        });
    }
    Ok((maps, log))
}

// ── stage 2: retraining ──────────────────────────────────────────────────────

/// Teacher embeddings for every training pair, computed once. Pairs are a
/// pure function of their index, so this equals a fresh forward per step.
pub struct TeacherCache<S: Scalar> {
    img: Tensor<S>,
    txt: Tensor<S>,
    scale: S,
}

impl<S: Scalar> TeacherCache<S> {
    pub fn build(
        teacher: &ClipModel<S>,
        dspec: &SyntheticSpec,
        table: &SplitTable,
    ) -> Result<Self> {
        let e = teacher.image.config.embed_dim;
        let n = dspec.train_size;
        let mut img_data = Vec::with_capacity(n * e);
        let mut txt_data = Vec::with_capacity(n * e);
        let chunk = 64;
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let (img, txt) = make_batch::<S>(dspec, table, Split::Train, &idx);
            img_data.extend_from_slice(encode_image(teacher, &img)?.data());
            txt_data.extend_from_slice(encode_text(teacher, &txt)?.data());
            start += chunk;
        }
        Ok(TeacherCache {
            img: Tensor::new(vec![n, e], img_data)?,
            txt: Tensor::new(vec![n, e], txt_data)?,
            scale: teacher.logit_scale(),
        })
    }

    /// Teacher logits for a batch of training-pair indices.
    pub fn logits(&self, indices: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let e = self.img.shape()[1];
        let gather = |src: &Tensor<S>| {
            let mut data = Vec::with_capacity(indices.len() * e);
            for &i in indices {
                data.extend_from_slice(&src.data()[i * e..(i + 1) * e]);
            }
            Tensor::new(vec![indices.len(), e], data)
        };
        clip_logits(&gather(&self.img)?, &gather(&self.txt)?, self.scale)
    }
}

/// Retrain the materialized student with λ-weighted distillation from the
/// frozen teacher. Returns the trained student and the loss log.
pub fn run_retraining_stage<S: Scalar>(
    teacher: &ClipModel<S>,
    mut student: ClipModel<S>,
    dspec: &SyntheticSpec,
    table: &SplitTable,
    cfg: &StageConfig,
    w: LossWeights,
) -> Result<(ClipModel<S>, Vec<LossLogEntry>)> {
    cfg.validate()?;
    let teacher_sum = teacher.checksum();
    let cache = TeacherCache::build(teacher, dspec, table)?;
    let shapes: Vec<Vec<usize>> = student
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut opt = OptimState::new(&shapes);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();

    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = batch_indices(dspec.train_size, cfg.batch, cfg.seed, epoch)?;
            queue.reverse();
            epoch += 1;
        }
        let idx = queue.pop().expect("batch sizes validated");
        let (img, txt) = make_batch::<S>(dspec, table, Split::Train, &idx);
        let (t_i2t, t_t2i) = cache.logits(&idx)?;

        let mut tape = Tape::new();
        let img_nodes = EncoderNodes::stage(&mut tape, &student.image.weights, true);
        let txt_nodes = EncoderNodes::stage(&mut tape, &student.text.weights, true);
        let log_scale = tape.leaf(student.log_logit_scale.clone(), true);
        let scale = tape.exp(log_scale);
        let ie = encode_image_nodes(&mut tape, &student.image.config, &img_nodes, &img)?;
        let te = encode_text_nodes(&mut tape, &student.text.config, &txt_nodes, &txt)?;
        let (i2t, t2i) = clip_logits_nodes(&mut tape, ie, te, scale)?;
        let task = clip_task_loss_nodes(&mut tape, i2t, t2i)?;
        let soft = distill_loss_nodes(&mut tape, i2t, t2i, &t_i2t, &t_t2i)?;
        let total = total_loss_nodes(&mut tape, task, soft, w)?;
        let task_val = tape.value(task).scalar_value().as_f64();
        let soft_val = tape.value(soft).scalar_value().as_f64();
        let total_val = tape.value(total).scalar_value().as_f64();
        if !total_val.is_finite() {
            let named = student.named_tensors();
            let culprit = first_non_finite_name(&named).unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite {
                context: format!("retraining step {step}: non-finite loss (parameter {culprit})"),
            });
        }
        tape.backward(total)?;

        let mut node_ids: Vec<NodeId> = Vec::with_capacity(shapes.len());
        node_ids.extend(img_nodes.node_ids());
        node_ids.extend(txt_nodes.node_ids());
        node_ids.push(log_scale);
        let mut grads: Vec<Tensor<S>> = Vec::with_capacity(node_ids.len());
        for (pos, id) in node_ids.iter().enumerate() {
            let g = tape
                .grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape().to_vec()));
            if !g.all_finite() {
                let name = student.named_tensors()[pos].0.clone();
                return Err(Error::NonFinite {
                    context: format!("retraining step {step}: non-finite gradient for {name}"),
                });
            }
            grads.push(g);
        }
        let pre_clip = clip_gradients(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        {
            let mut named = student.named_tensors_mut();
            let mut params: Vec<&mut Tensor<S>> =
                named.iter_mut().map(|(_, t)| &mut **t).collect();
            adamw_step(&mut params, &grads, &mut opt, lr, cfg)?;
        }
        student.clamp_logit_scale();
        log.push(LossLogEntry {
            step,
            stage: StageKind::Retraining,
            lr,
            task_loss: task_val,
            soft_loss: soft_val,
            total_loss: total_val,
            grad_norm: pre_clip,
        });
    }

    if teacher.checksum() != teacher_sum {
        return Err(Error::Contract {
            op: "run_retraining_stage",
            detail: "teacher weights changed during retraining".into(),
        });
    }
    Ok((student, log))
}

/// Teacher pretraining: same loop as retraining but self-supervised (task
/// loss only, no teacher), training a model from scratch.
pub fn run_pretraining<S: Scalar>(
    mut model: ClipModel<S>,
    dspec: &SyntheticSpec,
    table: &SplitTable,
    cfg: &StageConfig,
) -> Result<(ClipModel<S>, Vec<LossLogEntry>)> {
    cfg.validate()?;
    let shapes: Vec<Vec<usize>> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut opt = OptimState::new(&shapes);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();

    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = batch_indices(dspec.train_size, cfg.batch, cfg.seed, epoch)?;
            queue.reverse();
            epoch += 1;
        }
        let idx = queue.pop().expect("batch sizes validated");
        let (img, txt) = make_batch::<S>(dspec, table, Split::Train, &idx);

        let mut tape = Tape::new();
        let img_nodes = EncoderNodes::stage(&mut tape, &model.image.weights, true);
        let txt_nodes = EncoderNodes::stage(&mut tape, &model.text.weights, true);
        let log_scale = tape.leaf(model.log_logit_scale.clone(), true);
        let scale = tape.exp(log_scale);
        let ie = encode_image_nodes(&mut tape, &model.image.config, &img_nodes, &img)?;
        let te = encode_text_nodes(&mut tape, &model.text.config, &txt_nodes, &txt)?;
        let (i2t, t2i) = clip_logits_nodes(&mut tape, ie, te, scale)?;
        let task = clip_task_loss_nodes(&mut tape, i2t, t2i)?;
        let task_val = tape.value(task).scalar_value().as_f64();
        if !task_val.is_finite() {
            let named = model.named_tensors();
            let culprit = first_non_finite_name(&named).unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite {
                context: format!("pretraining step {step}: non-finite loss (parameter {culprit})"),
            });
        }
        tape.backward(task)?;

        let mut node_ids: Vec<NodeId> = Vec::with_capacity(shapes.len());
        node_ids.extend(img_nodes.node_ids());
        node_ids.extend(txt_nodes.node_ids());
        node_ids.push(log_scale);
        let mut grads: Vec<Tensor<S>> = Vec::with_capacity(node_ids.len());
        for id in &node_ids {
            grads.push(
                tape.grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape().to_vec())),
            );
        }
        let pre_clip = clip_gradients(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        {
            let mut named = model.named_tensors_mut();
            let mut params: Vec<&mut Tensor<S>> =
                named.iter_mut().map(|(_, t)| &mut **t).collect();
            adamw_step(&mut params, &grads, &mut opt, lr, cfg)?;
        }
        model.clamp_logit_scale();
        log.push(LossLogEntry {
            step,
            stage: StageKind::Pretraining,
            lr,
            task_loss: task_val,
            soft_loss: f64::NAN,
            total_loss: task_val,
            grad_norm: pre_clip,
        });
    }
    Ok((model, log))
}

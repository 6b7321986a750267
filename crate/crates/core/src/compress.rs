//! Width and depth compression of a frozen dual encoder.
//!
//! Width maps are Kronecker-factorized: instead of a full R ∈ R^{D₂²×D₁²}
//! acting on vec(W), each weight block is mapped as F_out·W·F_inᵀ with two
//! small factors. Depth is compressed by a learnable matrix whose rows mix
//! source layers into student layers. Diagonal inheritance initialization
//! makes the initial student equal leading sub-blocks of the teacher, so
//! training starts from inherited weights rather than noise.
//!
//! Factor sharing keeps every interface consistent: one `f_emb_out` carries
//! the residual-stream width everywhere (embeddings, Q/K/V inputs, O output,
//! fc1 input, fc2 output, layer norms, projection input); per layer, Q and K
//! outputs share `f_qk_out`, V output and O input share `f_v_out`, and the
//! FFN hidden dimension is carried by `f_fc1_out` on both sides.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

// required in no_std builds, where f64 inherent math is unavailable
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::{
    ClipModel, Encoder, EncoderConfig, EncoderNodes, EncoderWeights, LayerNodes,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Largest dimension the explicit-Kronecker reference will materialize.
pub const KRON_ORACLE_CAP: usize = 16;

/// Target sizes for one tower pair; source sizes come from the teacher config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionSpec {
    /// Target width D₂ (≤ source width, divisible by head count).
    pub width: usize,
    /// Target depth L₂ (≤ source depth).
    pub depth: usize,
    /// Stddev of off-diagonal noise in diagonal inheritance init (0 = exact).
    pub off_diag_std: f64,
}

impl CompressionSpec {
    pub fn validate(&self, teacher: &EncoderConfig) -> Result<()> {
        teacher.validate()?;
        if self.width == 0 || self.width > teacher.width {
            return Err(Error::Contract {
                op: "CompressionSpec",
                detail: format!("target width {} outside 1..={}", self.width, teacher.width),
            });
        }
        if self.width % teacher.heads != 0 {
            return Err(Error::Contract {
                op: "CompressionSpec",
                detail: format!(
                    "target width {} not divisible by {} heads",
                    self.width, teacher.heads
                ),
            });
        }
        if self.depth == 0 || self.depth > teacher.depth {
            return Err(Error::Contract {
                op: "CompressionSpec",
                detail: format!("target depth {} outside 1..={}", self.depth, teacher.depth),
            });
        }
        if !(self.off_diag_std >= 0.0) {
            return Err(Error::Contract {
                op: "CompressionSpec",
                detail: format!("off_diag_std {} must be >= 0", self.off_diag_std),
            });
        }
        Ok(())
    }

    /// The student's architecture: same everything except width and depth.
    pub fn student_config(&self, teacher: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            depth: self.depth,
            ..*teacher
        }
    }
}

// ── core map operations ──────────────────────────────────────────────────────

/// F_out · W · F_inᵀ without materializing the Kronecker product.
pub fn kron_map_apply<S: Scalar>(
    w: &Tensor<S>,
    f_out: &Tensor<S>,
    f_in: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (o1, i1) = w.dims2()?;
    let (o2, fo_cols) = f_out.dims2()?;
    let (i2, fi_cols) = f_in.dims2()?;
    if fo_cols != o1 || fi_cols != i1 {
        return Err(Error::ShapeMismatch {
            op: "kron_map_apply",
            detail: format!(
                "W {:?}, F_out {:?}, F_in {:?}",
                w.shape(),
                f_out.shape(),
                f_in.shape()
            ),
        });
    }
    let tmp = tensor::matmul(f_out.data(), w.data(), o2, o1, i1);
    let mut out = vec![S::zero(); o2 * i2];
    tensor::matmul_nt_acc(&tmp, f_in.data(), &mut out, o2, i1, i2);
    Tensor::new(vec![o2, i2], out)
}

/// Reference implementation: materializes R = F_in ⊗ F_out, multiplies the
/// column-stacked vec(W), and reshapes. Only for small shapes.
pub fn explicit_kron_oracle<S: Scalar>(
    f_in: &Tensor<S>,
    f_out: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (o1, i1) = w.dims2()?;
    let (o2, fo_cols) = f_out.dims2()?;
    let (i2, fi_cols) = f_in.dims2()?;
    if fo_cols != o1 || fi_cols != i1 {
        return Err(Error::ShapeMismatch {
            op: "explicit_kron_oracle",
            detail: format!(
                "W {:?}, F_out {:?}, F_in {:?}",
                w.shape(),
                f_out.shape(),
                f_in.shape()
            ),
        });
    }
    for &d in &[o1, i1, o2, i2] {
        if d > KRON_ORACLE_CAP {
            return Err(Error::KroneckerTooLarge { dim: d, cap: KRON_ORACLE_CAP });
        }
    }
    // R[(i·o2 + k), (j·o1 + l)] = F_in[i,j] · F_out[k,l]
    let rows = i2 * o2;
    let cols = i1 * o1;
    let mut r = vec![S::zero(); rows * cols];
    for i in 0..i2 {
        for j in 0..i1 {
            let a = f_in.get2(i, j);
            for k in 0..o2 {
                for l in 0..o1 {
                    r[(i * o2 + k) * cols + (j * o1 + l)] = a * f_out.get2(k, l);
                }
            }
        }
    }
    // vec(W) column-stacked: v[j·o1 + l] = W[l, j]
    let mut v = vec![S::zero(); cols];
    for j in 0..i1 {
        for l in 0..o1 {
            v[j * o1 + l] = w.get2(l, j);
        }
    }
    let y = tensor::matmul(&r, &v, rows, cols, 1);
    // un-vec: y[i·o2 + k] = out[k, i]
    let mut out = vec![S::zero(); o2 * i2];
    for i in 0..i2 {
        for k in 0..o2 {
            out[k * i2 + i] = y[i * o2 + k];
        }
    }
    Tensor::new(vec![o2, i2], out)
}

/// Rectangular identity with optional Gaussian off-diagonal noise: exact 1 on
/// the diagonal, N(0, std²) elsewhere (exact 0 when std = 0).
pub fn diag_inherit_init<S: Scalar>(
    rows: usize,
    cols: usize,
    off_diag_std: f64,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    if rows > cols {
        return Err(Error::Contract {
            op: "diag_inherit_init",
            detail: format!("{rows} rows > {cols} cols; compression maps are wide"),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(if i == j {
                S::one()
            } else if off_diag_std == 0.0 {
                S::zero()
            } else {
                S::from_f64(rng.normal() * off_diag_std)
            });
        }
    }
    Tensor::new(vec![rows, cols], data)
}

/// Evenly-spaced source-layer selector: row l' has a single 1 at column
/// round((l'+1)·L₁/L₂) − 1, so the last source layer is always selected and
/// L₂ = L₁ yields the identity.
pub fn depth_selector_init<S: Scalar>(l2: usize, l1: usize) -> Result<Tensor<S>> {
    if l2 > l1 || l2 == 0 {
        return Err(Error::Contract {
            op: "depth_selector_init",
            detail: format!("target depth {l2} outside 1..={l1}"),
        });
    }
    let mut t = Tensor::zeros(vec![l2, l1]);
    for lp in 0..l2 {
        let col = ((lp + 1) as f64 * l1 as f64 / l2 as f64).round() as usize - 1;
        t.set2(lp, col, S::one());
    }
    Ok(t)
}

/// New block l' = Σ_l L_depth[l', l] · blocks[l], elementwise.
pub fn depth_combine<S: Scalar>(
    blocks: &[Tensor<S>],
    l_depth: &Tensor<S>,
) -> Result<Vec<Tensor<S>>> {
    let (l2, l1) = l_depth.dims2()?;
    if blocks.len() != l1 {
        return Err(Error::ShapeMismatch {
            op: "depth_combine",
            detail: format!("{} blocks vs L_depth {:?}", blocks.len(), l_depth.shape()),
        });
    }
    let shape = blocks[0].shape().to_vec();
    for b in blocks {
        if b.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "depth_combine",
                detail: format!("block shapes differ: {:?} vs {:?}", shape, b.shape()),
            });
        }
    }
    let mut out = Vec::with_capacity(l2);
    for lp in 0..l2 {
        let mut acc = Tensor::zeros(shape.clone());
        for (l, b) in blocks.iter().enumerate() {
            let c = l_depth.get2(lp, l);
            for (a, &v) in acc.data_mut().iter_mut().zip(b.data()) {
                *a = *a + c * v;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

// ── variance probe ───────────────────────────────────────────────────────────

/// Empirical statistics of Kronecker-product entries under independent
/// zero-mean Gaussian factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceProbe {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub n_samples: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Monte-Carlo check of Var(A⊗B entries) = σ_A²·σ_B². Draws `dims`-shaped
/// factor pairs until at least `n_samples` product entries are accumulated.
pub fn variance_probe(
    sigma_a: f64,
    sigma_b: f64,
    dims: (usize, usize),
    n_samples: usize,
    seed: u64,
) -> Result<VarianceProbe> {
    if n_samples < 100_000 {
        return Err(Error::Contract {
            op: "variance_probe",
            detail: format!("n_samples {n_samples} < 1e5 gives unreliable statistics"),
        });
    }
    let (ra, ca) = dims;
    let per_draw = ra * ca * ra * ca;
    let mut rng = Rng::substream(seed, "variance_probe");
    let mut n = 0usize;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    while n < n_samples {
        let a = rng.normal_vec(ra * ca, sigma_a);
        let b = rng.normal_vec(ra * ca, sigma_b);
        // Entries of A⊗B are all pairwise products, so the sums factorize.
        let (sa, sa2) = a.iter().fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x));
        let (sb, sb2) = b.iter().fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x));
        s1 += sa * sb;
        s2 += sa2 * sb2;
        n += per_draw;
    }
    let mean = s1 / n as f64;
    let variance = s2 / n as f64 - mean * mean;
    Ok(VarianceProbe { sigma_a, sigma_b, n_samples: n, mean, variance })
}

// ── learnable map parameters ─────────────────────────────────────────────────

/// How the mapping parameters are initialized (the compare-init schemes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapInit {
    /// Rectangular identity plus optional off-diagonal noise; depth map is
    /// the evenly-spaced selector.
    DiagInherit { off_diag_std: f64 },
    /// Every entry N(0, 0.02²).
    Random,
    /// Every entry N(0, 2/fan_in).
    FanIn,
    /// Every entry N(0, 2/(fan_in+fan_out)).
    FanAvg,
}

impl MapInit {
    pub fn label(&self) -> &'static str {
        match self {
            MapInit::DiagInherit { .. } => "diag",
            MapInit::Random => "random",
            MapInit::FanIn => "fan_in",
            MapInit::FanAvg => "fan_avg",
        }
    }

    fn matrix<S: Scalar>(&self, rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<S>> {
        let std = match *self {
            MapInit::DiagInherit { off_diag_std } => {
                return diag_inherit_init(rows, cols, off_diag_std, rng)
            }
            MapInit::Random => 0.02,
            MapInit::FanIn => (2.0 / cols as f64).sqrt(),
            MapInit::FanAvg => (2.0 / (rows + cols) as f64).sqrt(),
        };
        Tensor::from_f64(vec![rows, cols], &rng.normal_vec(rows * cols, std))
    }

    fn depth<S: Scalar>(&self, l2: usize, l1: usize, rng: &mut Rng) -> Result<Tensor<S>> {
        match *self {
            MapInit::DiagInherit { .. } => depth_selector_init(l2, l1),
            _ => self.matrix(l2, l1, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps<S: Scalar> {
    /// [D₂, D₁]: output map shared by Q and K.
    pub f_qk_out: Tensor<S>,
    /// [D₂, D₁]: V output map, reused as O's input map.
    pub f_v_out: Tensor<S>,
    /// [m·D₂, m·D₁]: FFN hidden map, fc1 output and fc2 input.
    pub f_fc1_out: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerMaps<S: Scalar> {
    /// [D₂, D₁]: the shared residual-stream map.
    pub f_emb_out: Tensor<S>,
    /// One set per teacher (source) layer.
    pub layers: Vec<LayerMaps<S>>,
    /// [L₂, L₁] depth-mixing matrix, shared across all component roles.
    pub l_depth: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMaps<S: Scalar> {
    pub image: TowerMaps<S>,
    pub text: TowerMaps<S>,
}

impl<S: Scalar> TowerMaps<S> {
    pub fn init(
        teacher: &EncoderConfig,
        spec: &CompressionSpec,
        scheme: MapInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate(teacher)?;
        let (d1, d2) = (teacher.width, spec.width);
        let m = teacher.ffn_mult;
        let mut layers = Vec::with_capacity(teacher.depth);
        let f_emb_out = scheme.matrix(d2, d1, rng)?;
        for _ in 0..teacher.depth {
            layers.push(LayerMaps {
                f_qk_out: scheme.matrix(d2, d1, rng)?,
                f_v_out: scheme.matrix(d2, d1, rng)?,
                f_fc1_out: scheme.matrix(m * d2, m * d1, rng)?,
            });
        }
        let l_depth = scheme.depth(spec.depth, teacher.depth, rng)?;
        Ok(TowerMaps { f_emb_out, layers, l_depth })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![("f_emb_out".into(), &self.f_emb_out)];
        for (l, m) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.f_qk_out"), &m.f_qk_out));
            out.push((format!("layers.{l}.f_v_out"), &m.f_v_out));
            out.push((format!("layers.{l}.f_fc1_out"), &m.f_fc1_out));
        }
        out.push(("l_depth".into(), &self.l_depth));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> =
            vec![("f_emb_out".into(), &mut self.f_emb_out)];
        for (l, m) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.f_qk_out"), &mut m.f_qk_out));
            out.push((format!("layers.{l}.f_v_out"), &mut m.f_v_out));
            out.push((format!("layers.{l}.f_fc1_out"), &mut m.f_fc1_out));
        }
        out.push(("l_depth".into(), &mut self.l_depth));
        out
    }
}

impl<S: Scalar> ClipMaps<S> {
    pub fn init(
        image_cfg: &EncoderConfig,
        text_cfg: &EncoderConfig,
        spec: &CompressionSpec,
        scheme: MapInit,
        seed: u64,
    ) -> Result<Self> {
        let mut img_rng = Rng::substream(seed, "maps.img");
        let mut txt_rng = Rng::substream(seed, "maps.txt");
        Ok(ClipMaps {
            image: TowerMaps::init(image_cfg, spec, scheme, &mut img_rng)?,
            text: TowerMaps::init(text_cfg, spec, scheme, &mut txt_rng)?,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        for (n, t) in self.image.named_tensors() {
            out.push((format!("img.{n}"), t));
        }
        for (n, t) in self.text.named_tensors() {
            out.push((format!("txt.{n}"), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (n, t) in self.image.named_tensors_mut() {
            out.push((format!("img.{n}"), t));
        }
        for (n, t) in self.text.named_tensors_mut() {
            out.push((format!("txt.{n}"), t));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Closed-form learnable mapping-scalar count for one tower:
/// |f_emb_out| + Σ_l (|f_qk_out| + |f_v_out| + |f_fc1_out|) + |l_depth|.
pub fn mapping_param_count(teacher: &EncoderConfig, spec: &CompressionSpec) -> usize {
    let (d1, d2, m) = (teacher.width, spec.width, teacher.ffn_mult);
    d2 * d1 + teacher.depth * (2 * d2 * d1 + (m * d2) * (m * d1)) + spec.depth * teacher.depth
}

// ── student construction ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerMapNodes {
    pub f_qk_out: NodeId,
    pub f_v_out: NodeId,
    pub f_fc1_out: NodeId,
}

#[derive(Debug, Clone)]
pub struct TowerMapNodes {
    pub f_emb_out: NodeId,
    pub layers: Vec<LayerMapNodes>,
    pub l_depth: NodeId,
}

impl TowerMapNodes {
    pub fn stage<S: Scalar>(
        tape: &mut Tape<S>,
        maps: &TowerMaps<S>,
        requires_grad: bool,
    ) -> Self {
        let mut l = |t: &Tensor<S>| tape.leaf(t.clone(), requires_grad);
        TowerMapNodes {
            f_emb_out: l(&maps.f_emb_out),
            layers: maps
                .layers
                .iter()
                .map(|m| LayerMapNodes {
                    f_qk_out: l(&m.f_qk_out),
                    f_v_out: l(&m.f_v_out),
                    f_fc1_out: l(&m.f_fc1_out),
                })
                .collect(),
            l_depth: l(&maps.l_depth),
        }
    }

    /// (name, node) pairs in the same order as `TowerMaps::named_tensors`.
    pub fn named_nodes(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = vec![("f_emb_out".into(), self.f_emb_out)];
        for (l, m) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.f_qk_out"), m.f_qk_out));
            out.push((format!("layers.{l}.f_v_out"), m.f_v_out));
            out.push((format!("layers.{l}.f_fc1_out"), m.f_fc1_out));
        }
        out.push(("l_depth".into(), self.l_depth));
        out
    }
}

/// b' = F·b for a vector b living in the output space of its block.
fn map_vec<S: Scalar>(tape: &mut Tape<S>, f: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.value(b).numel();
    let col = tape.reshape(b, vec![d, 1])?;
    let mapped = tape.matmul(f, col)?;
    let rows = tape.value(mapped).shape()[0];
    tape.reshape(mapped, vec![rows])
}

/// W' = F_out · W · F_inᵀ on the tape.
fn map_block<S: Scalar>(
    tape: &mut Tape<S>,
    f_out: NodeId,
    w: NodeId,
    f_in: NodeId,
) -> Result<NodeId> {
    let tmp = tape.matmul(f_out, w)?;
    let fit = tape.transpose_last2(f_in)?;
    tape.matmul(tmp, fit)
}

/// Differentiable student-tower construction. Teacher weights enter the tape
/// as constants; gradients flow only into the map nodes. Width-maps every
/// source layer under the sharing contract, then mixes layers with `l_depth`.
pub fn build_tower_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &EncoderWeights<S>,
    maps: &TowerMapNodes,
) -> Result<EncoderNodes> {
    if teacher.layers.len() != maps.layers.len() {
        return Err(Error::ShapeMismatch {
            op: "build_tower_nodes",
            detail: format!(
                "{} teacher layers vs {} map sets",
                teacher.layers.len(),
                maps.layers.len()
            ),
        });
    }
    let fe = maps.f_emb_out;
    let fe_t = tape.transpose_last2(fe)?;

    let embed_c = tape.constant(teacher.embed.clone());
    let embed = tape.matmul(embed_c, fe_t)?;
    let cls = match &teacher.cls {
        Some(c) => {
            let cc = tape.constant(c.clone());
            Some(map_vec(tape, fe, cc)?)
        }
        None => None,
    };
    let pos_c = tape.constant(teacher.pos.clone());
    let pos = tape.matmul(pos_c, fe_t)?;

    // Width-map each source layer's sixteen tensors.
    let mut mapped: Vec<Vec<NodeId>> = Vec::with_capacity(teacher.layers.len());
    for (lw, lm) in teacher.layers.iter().zip(&maps.layers) {
        let c = |tape: &mut Tape<S>, t: &Tensor<S>| tape.constant(t.clone());
        let wq = c(tape, &lw.wq);
        let wk = c(tape, &lw.wk);
        let wv = c(tape, &lw.wv);
        let wo = c(tape, &lw.wo);
        let w_fc1 = c(tape, &lw.w_fc1);
        let w_fc2 = c(tape, &lw.w_fc2);
        let bq = c(tape, &lw.bq);
        let bk = c(tape, &lw.bk);
        let bv = c(tape, &lw.bv);
        let bo = c(tape, &lw.bo);
        let b_fc1 = c(tape, &lw.b_fc1);
        let b_fc2 = c(tape, &lw.b_fc2);
        let ln1g = c(tape, &lw.ln1_gamma);
        let ln1b = c(tape, &lw.ln1_beta);
        let ln2g = c(tape, &lw.ln2_gamma);
        let ln2b = c(tape, &lw.ln2_beta);
        mapped.push(vec![
            map_block(tape, lm.f_qk_out, wq, fe)?,
            map_block(tape, lm.f_qk_out, wk, fe)?,
            map_block(tape, lm.f_v_out, wv, fe)?,
            map_block(tape, fe, wo, lm.f_v_out)?,
            map_vec(tape, lm.f_qk_out, bq)?,
            map_vec(tape, lm.f_qk_out, bk)?,
            map_vec(tape, lm.f_v_out, bv)?,
            map_vec(tape, fe, bo)?,
            map_block(tape, lm.f_fc1_out, w_fc1, fe)?,
            map_vec(tape, lm.f_fc1_out, b_fc1)?,
            map_block(tape, fe, w_fc2, lm.f_fc1_out)?,
            map_vec(tape, fe, b_fc2)?,
            map_vec(tape, fe, ln1g)?,
            map_vec(tape, fe, ln1b)?,
            map_vec(tape, fe, ln2g)?,
            map_vec(tape, fe, ln2b)?,
        ]);
    }

    // Depth mixing: student layer l' blends role r across all source layers.
    let l2 = tape.value(maps.l_depth).shape()[0];
    let mut layers = Vec::with_capacity(l2);
    for lp in 0..l2 {
        let row = tape.gather_rows(maps.l_depth, vec![lp])?;
        let mix =
            |tape: &mut Tape<S>, role: usize| -> Result<NodeId> {
                let blocks: Vec<NodeId> = mapped.iter().map(|m| m[role]).collect();
                tape.depth_mix(row, &blocks)
            };
        layers.push(LayerNodes {
            wq: mix(tape, 0)?,
            wk: mix(tape, 1)?,
            wv: mix(tape, 2)?,
            wo: mix(tape, 3)?,
            bq: mix(tape, 4)?,
            bk: mix(tape, 5)?,
            bv: mix(tape, 6)?,
            bo: mix(tape, 7)?,
            w_fc1: mix(tape, 8)?,
            b_fc1: mix(tape, 9)?,
            w_fc2: mix(tape, 10)?,
            b_fc2: mix(tape, 11)?,
            ln1_gamma: mix(tape, 12)?,
            ln1_beta: mix(tape, 13)?,
            ln2_gamma: mix(tape, 14)?,
            ln2_beta: mix(tape, 15)?,
        });
    }

    let flng = tape.constant(teacher.final_ln_gamma.clone());
    let flnb = tape.constant(teacher.final_ln_beta.clone());
    let proj_c = tape.constant(teacher.proj.clone());
    Ok(EncoderNodes {
        embed,
        cls,
        pos,
        layers,
        final_ln_gamma: map_vec(tape, fe, flng)?,
        final_ln_beta: map_vec(tape, fe, flnb)?,
        proj: tape.matmul(proj_c, fe_t)?,
    })
}

/// Materialize the compressed student as plain weights. The teacher is
/// read-only; the output's shapes follow `spec.student_config`.
pub fn build_student<S: Scalar>(
    teacher: &ClipModel<S>,
    maps: &ClipMaps<S>,
    spec: &CompressionSpec,
) -> Result<ClipModel<S>> {
    spec.validate(&teacher.image.config)?;
    spec.validate(&teacher.text.config)?;
    let mut tape = Tape::new();
    let img_maps = TowerMapNodes::stage(&mut tape, &maps.image, false);
    let txt_maps = TowerMapNodes::stage(&mut tape, &maps.text, false);
    let img_nodes = build_tower_nodes(&mut tape, &teacher.image.weights, &img_maps)?;
    let txt_nodes = build_tower_nodes(&mut tape, &teacher.text.weights, &txt_maps)?;
    let student = ClipModel {
        image: Encoder {
            config: spec.student_config(&teacher.image.config),
            weights: img_nodes.extract(&tape),
        },
        text: Encoder {
            config: spec.student_config(&teacher.text.config),
            weights: txt_nodes.extract(&tape),
        },
        log_logit_scale: teacher.log_logit_scale.clone(),
    };
    student.image.weights.validate_shapes(&student.image.config)?;
    student.text.weights.validate_shapes(&student.text.config)?;
    Ok(student)
}

//! Evaluation metrics: bidirectional retrieval recall@K over aligned
//! image-text pairs, zero-shot attribute classification via wildcard prompts,
//! parameter accounting, and CSV formatting for mapping-matrix heatmaps.
//!
//! All ties break toward the lower index so every metric is deterministic.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{make_batch, prompt_for_class, Split, SplitTable, SyntheticSpec, TOKEN_PAD};
use crate::error::{Error, Result};
use crate::model::{encode_image, encode_text, ClipModel, TextBatch};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt_acc, Tensor};

/// Recall percentages at K ∈ {1, 5, 10} in both retrieval directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    /// Image-to-text recall@{1,5,10}, percent.
    pub tr: [f64; 3],
    /// Text-to-image recall@{1,5,10}, percent.
    pub ir: [f64; 3],
    pub n_pairs: usize,
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Rank of the ground-truth column `i` within row `i`: the number of columns
/// scoring strictly higher, plus equal-scoring columns with a lower index.
fn diag_rank<S: Scalar>(sim: &Tensor<S>, i: usize, n: usize) -> usize {
    let truth = sim.get2(i, i);
    let mut rank = 0;
    for j in 0..n {
        let v = sim.get2(i, j);
        if v > truth || (v == truth && j < i) {
            rank += 1;
        }
    }
    rank
}

/// Recall@K in both directions for a square similarity matrix whose row-`i`
/// ground truth is column `i`. Ties break toward the lower index.
pub fn recall_at_k<S: Scalar>(sim: &Tensor<S>) -> Result<RetrievalReport> {
    let (n, cols) = sim.dims2()?;
    if n != cols || n == 0 {
        return Err(Error::Contract {
            op: "recall_at_k",
            detail: format!("similarity must be square and non-empty, got {n}x{cols}"),
        });
    }
    let mut hits_tr = [0usize; 3];
    let mut hits_ir = [0usize; 3];
    let flipped =
        Tensor::new(alloc::vec![n, n], crate::tensor::transpose(sim.data(), n, n)).unwrap();
    for i in 0..n {
        let r_tr = diag_rank(sim, i, n);
        let r_ir = diag_rank(&flipped, i, n);
        for (slot, k) in RECALL_KS.iter().enumerate() {
            if r_tr < *k {
                hits_tr[slot] += 1;
            }
            if r_ir < *k {
                hits_ir[slot] += 1;
            }
        }
    }
    let pct = |h: [usize; 3]| h.map(|c| 100.0 * c as f64 / n as f64);
    Ok(RetrievalReport { tr: pct(hits_tr), ir: pct(hits_ir), n_pairs: n })
}

/// Retrieval over the first `n_pairs` examples of a split: encodes images and
/// captions, scores cosine similarity, and reports recall both ways.
pub fn evaluate_retrieval<S: Scalar>(
    model: &ClipModel<S>,
    dspec: &SyntheticSpec,
    table: &SplitTable,
    split: Split,
    n_pairs: usize,
) -> Result<RetrievalReport> {
    if n_pairs == 0 || n_pairs > split.size(dspec) {
        return Err(Error::Contract {
            op: "evaluate_retrieval",
            detail: format!("n_pairs {n_pairs} outside 1..={}", split.size(dspec)),
        });
    }
    let indices: Vec<usize> = (0..n_pairs).collect();
    let (img, txt) = make_batch::<S>(dspec, table, split, &indices);
    let ie = encode_image(model, &img)?;
    let te = encode_text(model, &txt)?;
    // embeddings are unit rows, so the dot product is the cosine similarity
    let e = ie.shape()[1];
    let mut sim = Tensor::zeros(alloc::vec![n_pairs, n_pairs]);
    matmul_nt_acc(ie.data(), te.data(), sim.data_mut(), n_pairs, e, n_pairs);
    recall_at_k(&sim)
}

/// Top-1 accuracy classifying attribute `k` of each of the first `n_images`
/// images in `split`, by argmax cosine similarity to the V wildcard prompts.
/// Argmax ties break toward the lower class index.
pub fn zero_shot_accuracy<S: Scalar>(
    model: &ClipModel<S>,
    dspec: &SyntheticSpec,
    table: &SplitTable,
    split: Split,
    k: usize,
    n_images: usize,
) -> Result<f64> {
    if n_images == 0 || n_images > split.size(dspec) {
        return Err(Error::Contract {
            op: "zero_shot_accuracy",
            detail: format!("n_images {n_images} outside 1..={}", split.size(dspec)),
        });
    }
    let mut ids = Vec::with_capacity(dspec.n_values);
    let mut lens = Vec::with_capacity(dspec.n_values);
    for v in 0..dspec.n_values {
        let prompt = prompt_for_class(dspec, k, v)?;
        let len = prompt.iter().rposition(|&t| t != TOKEN_PAD).map_or(0, |p| p + 1);
        ids.push(prompt);
        lens.push(len);
    }
    let prompts = encode_text(model, &TextBatch { ids, lens })?;

    let mut correct = 0usize;
    for i in 0..n_images {
        let pair = crate::data::generate_pair_cached::<S>(dspec, table, split, i);
        let img = crate::model::ImageBatch { pixels: pair.image.reshaped(alloc::vec![
            1,
            dspec.grid * dspec.grid,
            dspec.patch_dim()
        ])? };
        let emb = encode_image(model, &img)?;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for v in 0..dspec.n_values {
            let score: f64 = (0..emb.shape()[1])
                .map(|d| (emb.get2(0, d) * prompts.get2(v, d)).as_f64())
                .sum();
            if score > best_score {
                best_score = score;
                best = v;
            }
        }
        if best == pair.latent[k] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / n_images as f64)
}

/// Learnable-scalar counts: (image tower, text tower, total incl. logit scale).
pub fn count_params<S: Scalar>(model: &ClipModel<S>) -> (usize, usize, usize) {
    model.param_counts()
}

/// Sum of |entries| off the main diagonal; tracks how far a map has drifted
/// from its diagonal initialization.
pub fn off_diagonal_mass<S: Scalar>(m: &Tensor<S>) -> Result<f64> {
    let (rows, cols) = m.dims2()?;
    let mut mass = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if r != c {
                mass += m.get2(r, c).as_f64().abs();
            }
        }
    }
    Ok(mass)
}

/// CSV rendering of one matrix: `# name rows cols epoch` header, then one
/// row per line with full-precision decimal values.
pub fn heatmap_csv<S: Scalar>(name: &str, m: &Tensor<S>, epoch: usize) -> Result<String> {
    let (rows, cols) = m.dims2()?;
    if !m.all_finite() {
        return Err(Error::NonFinite { context: format!("heatmap_csv: {name}") });
    }
    let mut out = format!("# {name} {rows} {cols} {epoch}\n");
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            // enough digits to round-trip f64 exactly
            out.push_str(&format!("{:?}", m.get2(r, c).as_f64()));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse a heatmap CSV back into (name, epoch, matrix); inverse of
/// `heatmap_csv` for well-formed input.
pub fn parse_heatmap_csv<S: Scalar>(text: &str) -> Result<(String, usize, Tensor<S>)> {
    let bad = |detail: String| Error::Contract { op: "parse_heatmap_csv", detail };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "#" {
        return Err(bad(format!("malformed header: {header}")));
    }
    let name = String::from(fields[1]);
    let rows: usize = fields[2].parse().map_err(|_| bad("bad row count".into()))?;
    let cols: usize = fields[3].parse().map_err(|_| bad("bad col count".into()))?;
    let epoch: usize = fields[4].parse().map_err(|_| bad("bad epoch".into()))?;
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| bad(format!("bad cell {cell}")))?;
            data.push(S::from_f64(v));
        }
    }
    let m = Tensor::new(alloc::vec![rows, cols], data)
        .map_err(|_| bad("cell count does not match header dims".into()))?;
    Ok((name, epoch, m))
}

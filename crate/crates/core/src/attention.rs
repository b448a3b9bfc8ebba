//! Reference multi-head attention and its tensor-contraction form.
//!
//! `mha_forward` is the classical per-head computation. `stack_attention_tensors`
//! collects the per-head bilinear forms `Wq_i Wk_i^T` into the pre-softmax
//! tensor and the (transposed) linear forms `Wv_i Wo_i` into the post-softmax
//! tensor; `tensor_mha_forward` evaluates attention directly from that pair.
//! The two paths agree to floating-point accuracy, which makes this module
//! the oracle for every factored or cached evaluation elsewhere.

use alloc::format;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{mode_product, Matrix, Tensor3};

/// Per-head projection weights of standard multi-head attention.
///
/// `wq`, `wk`, `wv` are `d_model x d_model` with head `i` occupying the
/// column block `[i*d_head, (i+1)*d_head)`. `wo` is `d_model x d_model` with
/// head `i` occupying the matching row block.
#[derive(Debug, Clone)]
pub struct MhaWeights {
    pub n_heads: usize,
    pub d_model: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl MhaWeights {
    pub fn new(n_heads: usize, wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix) -> Result<Self> {
        let d_model = wq.rows();
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "head count {n_heads} must divide d_model {d_model}"
            )));
        }
        for (name, m) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if (m.rows(), m.cols()) != (d_model, d_model) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} must be {d_model}x{d_model}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self {
            n_heads,
            d_model,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Query block of head `i` (`d_model x d_head`).
    pub fn wq_head(&self, i: usize) -> Matrix {
        self.wq.col_block(i * self.d_head(), self.d_head())
    }

    pub fn wk_head(&self, i: usize) -> Matrix {
        self.wk.col_block(i * self.d_head(), self.d_head())
    }

    pub fn wv_head(&self, i: usize) -> Matrix {
        self.wv.col_block(i * self.d_head(), self.d_head())
    }

    /// Output block of head `i` (`d_head x d_model`).
    pub fn wo_head(&self, i: usize) -> Matrix {
        self.wo.row_block(i * self.d_head(), self.d_head())
    }

    /// Total stored weight entries (the four projection matrices).
    pub fn param_count(&self) -> u64 {
        4 * (self.d_model as u64) * (self.d_model as u64)
    }

    /// Random weights scaled like a standard transformer init.
    pub fn random(n_heads: usize, d_model: usize, rng: &mut crate::rng::SeededRng) -> Result<Self> {
        let scale = 1.0 / math::sqrt(d_model as f64);
        let mut gen = || {
            let mut m = rng.normal_matrix(d_model, d_model);
            for v in m.data_mut() {
                *v *= scale;
            }
            m
        };
        let (wq, wk, wv, wo) = (gen(), gen(), gen(), gen());
        Self::new(n_heads, wq, wk, wv, wo)
    }
}

/// An embedded token sequence plus the masking mode to evaluate under.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    /// `n_tokens x d_model` embeddings.
    pub x: Matrix,
    /// Apply a causal mask (token `m` attends to tokens `<= m`).
    pub causal: bool,
}

impl SequenceInput {
    pub fn new(x: Matrix, causal: bool) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("sequence must have at least one token".into()));
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument("sequence has non-finite entries".into()));
        }
        Ok(Self { x, causal })
    }

    pub fn n_tokens(&self) -> usize {
        self.x.rows()
    }
}

/// The stacked pre-softmax tensor (head x d_model x d_model, slice `i` is
/// `Wq_i Wk_i^T`) and post-softmax tensor (slice `i` is `(Wv_i Wo_i)^T`).
#[derive(Debug, Clone)]
pub struct AttentionTensorPair {
    pub w_pre: Tensor3,
    pub w_post: Tensor3,
}

impl AttentionTensorPair {
    pub fn n_heads(&self) -> usize {
        self.w_pre.dims().0
    }

    pub fn d_model(&self) -> usize {
        self.w_pre.dims().1
    }
}

/// Row-wise softmax with max-subtraction; `causal` zeroes entries with
/// column index greater than row index before normalization.
pub fn softmax_rows(m: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let limit = if causal { (r + 1).min(m.cols()) } else { m.cols() };
        let row = m.row(r);
        let mx = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..limit {
            let e = math::exp(row[c] - mx);
            out.set(r, c, e);
            denom += e;
        }
        for c in 0..limit {
            out.set(r, c, out.get(r, c) / denom);
        }
    }
    out
}

/// Classical multi-head attention: sum over heads of
/// `softmax(X Wq_i (X Wk_i)^T / sqrt(d_head)) X Wv_i Wo_i`.
pub fn mha_forward(w: &MhaWeights, input: &SequenceInput) -> Result<Matrix> {
    if input.x.cols() != w.d_model {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match d_model {}",
            input.x.cols(),
            w.d_model
        )));
    }
    let n = input.n_tokens();
    let scale = 1.0 / math::sqrt(w.d_head() as f64);
    let mut out = Matrix::zeros(n, w.d_model);
    for i in 0..w.n_heads {
        let q = input.x.matmul(&w.wq_head(i));
        let k = input.x.matmul(&w.wk_head(i));
        let v = input.x.matmul(&w.wv_head(i));
        let scores = q.matmul_transposed(&k).scale(scale);
        let attn = softmax_rows(&scores, input.causal);
        let head = attn.matmul(&v).matmul(&w.wo_head(i));
        out = out.add(&head);
    }
    Ok(out)
}

/// Stack the per-head weight products into the attention tensor pair.
pub fn stack_attention_tensors(w: &MhaWeights) -> AttentionTensorPair {
    let d = w.d_model;
    let mut w_pre = Tensor3::zeros((w.n_heads, d, d));
    let mut w_post = Tensor3::zeros((w.n_heads, d, d));
    for i in 0..w.n_heads {
        let pre = w.wq_head(i).matmul_transposed(&w.wk_head(i));
        let post = w.wv_head(i).matmul(&w.wo_head(i)).transpose();
        w_pre.set_slice1(i, &pre);
        w_post.set_slice1(i, &post);
    }
    AttentionTensorPair { w_pre, w_post }
}

/// Attention evaluated from the stacked tensor pair: computes the per-head
/// score tensor `softmax(w_pre x2 X x3 X / sqrt(scale_dim))`, the projected
/// values `w_post x3 X`, and contracts them over head and key positions.
pub fn tensor_mha_forward(
    pair: &AttentionTensorPair,
    input: &SequenceInput,
    scale_dim: usize,
) -> Result<Matrix> {
    let d = pair.d_model();
    if input.x.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match tensor d_model {d}",
            input.x.cols()
        )));
    }
    if pair.w_pre.dims().2 != d || pair.w_post.dims() != pair.w_pre.dims() {
        return Err(Error::ShapeMismatch(format!(
            "tensor pair dims {:?} / {:?} are not (heads, d, d)",
            pair.w_pre.dims(),
            pair.w_post.dims()
        )));
    }
    if scale_dim == 0 {
        return Err(Error::InvalidArgument("scale dimension must be positive".into()));
    }
    let n_heads = pair.n_heads();
    let n = input.n_tokens();
    let inv_scale = 1.0 / math::sqrt(scale_dim as f64);

    // scores = w_pre x2 X x3 X, shape (heads, n, n)
    let scores = mode_product(&mode_product(&pair.w_pre, &input.x, 2)?, &input.x, 3)?;
    // h2 = w_post x3 X, shape (heads, d, n)
    let h2 = mode_product(&pair.w_post, &input.x, 3)?;

    let mut out = Matrix::zeros(n, d);
    for i in 0..n_heads {
        let attn = softmax_rows(&scores.slice1(i).scale(inv_scale), input.causal);
        // out[m,k] += sum_l attn[m,l] * h2[i,k,l]
        let h2_slice = h2.slice1(i); // d x n
        let contrib = attn.matmul_transposed(&h2_slice); // n x d
        out = out.add(&contrib);
    }
    Ok(out)
}

/// Per-head attention probability tensor `(heads, n, n)` for the pair, used
/// by tests that inspect masking structure.
pub fn attention_probabilities(
    pair: &AttentionTensorPair,
    input: &SequenceInput,
    scale_dim: usize,
) -> Result<Tensor3> {
    let scores = mode_product(&mode_product(&pair.w_pre, &input.x, 2)?, &input.x, 3)?;
    let inv_scale = 1.0 / math::sqrt(scale_dim as f64);
    let n = input.n_tokens();
    let mut probs = Tensor3::zeros((pair.n_heads(), n, n));
    for i in 0..pair.n_heads() {
        let attn = softmax_rows(&scores.slice1(i).scale(inv_scale), input.causal);
        probs.set_slice1(i, &attn);
    }
    Ok(probs)
}

/// Largest relative deviation between two output matrices, normalized by the
/// reference Frobenius norm. Shared by the verification suites.
pub fn relative_deviation(got: &Matrix, reference: &Matrix) -> f64 {
    got.sub(reference).frobenius_norm() / reference.frobenius_norm().max(1e-30)
}

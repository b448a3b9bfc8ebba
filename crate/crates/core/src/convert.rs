//! Conversion of trained dense attention weights into grouped, latent, and
//! Tucker parametrizations, plus normalized singular-spectrum reports.
//!
//! The grouped conversion keeps each group's first key/value block; the
//! latent conversion factors the stacked query/key/value matrices by
//! truncated SVD with a balanced square-root split; the Tucker conversion is
//! a higher-order SVD of the stacked tensor pair. Reconstruction errors are
//! exactly the discarded singular mass, so callers can report them from the
//! same decompositions.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{stack_attention_tensors, AttentionTensorPair, MhaWeights};
use crate::error::{Error, Result};
use crate::linalg::{hosvd, svd, truncated_svd};
use crate::tensor::{matricize, mode_product, Matrix};
use crate::tucker::TuckerAttentionParams;
use crate::variants::{GqaWeights, MlaWeights};

/// Keep each group's first key/value head; queries and outputs pass through
/// unchanged.
pub fn mha_to_gqa(w: &MhaWeights, n_kv: usize) -> Result<GqaWeights> {
    if n_kv == 0 || w.n_heads % n_kv != 0 {
        return Err(Error::InvalidArgument(format!(
            "kv head count {n_kv} must divide head count {}",
            w.n_heads
        )));
    }
    let heads_per_group = w.n_heads / n_kv;
    let wk_groups: Vec<Matrix> = (0..n_kv).map(|g| w.wk_head(g * heads_per_group)).collect();
    let wv_groups: Vec<Matrix> = (0..n_kv).map(|g| w.wv_head(g * heads_per_group)).collect();
    GqaWeights::new(w.n_heads, n_kv, w.wq.clone(), wk_groups, wv_groups, w.wo.clone())
}

/// Balanced rank-`r` split `m ~ down * up` with `down = u sqrt(s)` and
/// `up = sqrt(s) v^T`.
fn balanced_split(m: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let dec = truncated_svd(m, r)?;
    let mut down = dec.u.clone();
    let mut up = dec.v.transpose();
    for (c, sv) in dec.s.iter().enumerate() {
        let root = crate::math::sqrt(*sv);
        for row in 0..down.rows() {
            down.set(row, c, down.get(row, c) * root);
        }
        for col in 0..up.cols() {
            up.set(c, col, up.get(c, col) * root);
        }
    }
    Ok((down, up))
}

/// Moore-Penrose pseudoinverse through the SVD, dropping directions below
/// `1e-12` of the largest singular value.
fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    let dec = svd(m)?;
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let mut vs = dec.v.clone();
    for (c, sv) in dec.s.iter().enumerate() {
        let inv = if *sv > smax * 1e-12 { 1.0 / sv } else { 0.0 };
        for row in 0..vs.rows() {
            vs.set(row, c, vs.get(row, c) * inv);
        }
    }
    Ok(vs.matmul_transposed(&dec.u))
}

/// Factor the query/key/value projections through latent down/up maps of
/// widths `d_cq` / `d_ck` by truncated SVD. In shared mode the value path
/// reuses the key down projection and its up projections are refit by least
/// squares onto that basis; the output projection is copied uncompressed.
pub fn mha_to_mla(w: &MhaWeights, d_cq: usize, d_ck: usize, shared: bool) -> Result<MlaWeights> {
    let d = w.d_model;
    if d_cq == 0 || d_cq > d || d_ck == 0 || d_ck > d {
        return Err(Error::InvalidArgument(format!(
            "latent dimensions ({d_cq}, {d_ck}) out of range 1..={d}"
        )));
    }
    let d_head = w.d_head();
    let (w_dq, uq_full) = balanced_split(&w.wq, d_cq)?;
    let (w_dkv, uk_full) = balanced_split(&w.wk, d_ck)?;
    let (w_dv, uv_full) = if shared {
        (None, pseudo_inverse(&w_dkv)?.matmul(&w.wv))
    } else {
        let (down, up) = balanced_split(&w.wv, d_ck)?;
        (Some(down), up)
    };
    let per_head = |full: &Matrix| -> Vec<Matrix> {
        (0..w.n_heads)
            .map(|i| full.col_block(i * d_head, d_head))
            .collect()
    };
    MlaWeights::new(
        w.n_heads,
        w_dq,
        per_head(&uq_full),
        w_dkv,
        per_head(&uk_full),
        per_head(&uv_full),
        w_dv,
        w.wo.clone(),
    )
}

/// Higher-order SVD of the stacked tensor pair at the given ranks. In shared
/// mode the post tensor reuses the pre tensor's key-mode factor and its core
/// is recomputed by projection onto that basis.
pub fn mha_to_tucker(
    w: &MhaWeights,
    ranks_pre: (usize, usize, usize),
    ranks_post: (usize, usize, usize),
    shared_kv: bool,
) -> Result<TuckerAttentionParams> {
    if shared_kv && ranks_pre.2 != ranks_post.2 {
        return Err(Error::InvalidArgument(format!(
            "shared key/value factor requires matching third ranks, got {} and {}",
            ranks_pre.2, ranks_post.2
        )));
    }
    let pair = stack_attention_tensors(w);
    tucker_from_pair(&pair, ranks_pre, ranks_post, shared_kv, w.d_head() as f64)
}

/// HOSVD of an explicit tensor pair; used by the weight conversion above and
/// by lifts of other variants.
pub fn tucker_from_pair(
    pair: &AttentionTensorPair,
    ranks_pre: (usize, usize, usize),
    ranks_post: (usize, usize, usize),
    shared_kv: bool,
    scale_dim: f64,
) -> Result<TuckerAttentionParams> {
    let pre = hosvd(&pair.w_pre, ranks_pre)?;
    let post = hosvd(&pair.w_post, ranks_post)?;
    let [u1, u2, u3] = pre.factors;
    if shared_kv {
        let [ut1, ut2, _] = post.factors;
        let core_post = mode_product(
            &mode_product(
                &mode_product(&pair.w_post, &ut1.transpose(), 1)?,
                &ut2.transpose(),
                2,
            )?,
            &u3.transpose(),
            3,
        )?;
        TuckerAttentionParams::new(pre.core, core_post, u1, u2, u3, ut1, ut2, None, scale_dim)
    } else {
        let [ut1, ut2, ut3] = post.factors;
        TuckerAttentionParams::new(
            pre.core,
            post.core,
            u1,
            u2,
            u3,
            ut1,
            ut2,
            Some(ut3),
            scale_dim,
        )
    }
}

/// Normalized singular values of one matricization, largest first. Empty for
/// an (exactly) zero unfolding; otherwise the first entry is exactly 1.
pub type ModeSpectrum = Vec<f64>;

/// Normalized singular spectra of all six matricizations of the pair.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Modes 1..3 of the pre-softmax tensor (head, query, key).
    pub pre: [ModeSpectrum; 3],
    /// Modes 1..3 of the post-softmax tensor (head, output, value).
    pub post: [ModeSpectrum; 3],
}

fn mode_spectrum(m: &Matrix) -> Result<ModeSpectrum> {
    let s = svd(m)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(Vec::new());
    }
    Ok(s.iter().map(|v| v / smax).collect())
}

/// Singular spectra of `Mat_j` for both tensors, each divided by its largest
/// value.
pub fn spectrum(pair: &AttentionTensorPair) -> Result<SpectrumReport> {
    let of_mode = |t, mode| -> Result<ModeSpectrum> { mode_spectrum(&matricize(t, mode)?) };
    Ok(SpectrumReport {
        pre: [
            of_mode(&pair.w_pre, 1)?,
            of_mode(&pair.w_pre, 2)?,
            of_mode(&pair.w_pre, 3)?,
        ],
        post: [
            of_mode(&pair.w_post, 1)?,
            of_mode(&pair.w_post, 2)?,
            of_mode(&pair.w_post, 3)?,
        ],
    })
}

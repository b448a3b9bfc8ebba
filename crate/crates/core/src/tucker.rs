//! Tucker-parametrized attention: a small core per tensor plus one basis
//! matrix per mode, evaluated without ever materializing the dense stacked
//! weight tensors.
//!
//! The pre-softmax side contracts the core with the head basis and the
//! projected sequence to form latent queries `(heads, n, r3)`; keys and
//! values live in the latent dimension as `X u3` / `X ut3`, which is also
//! exactly what a decode-time cache stores. With `shared_kv` a single factor
//! serves both keys and values and the cache halves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{softmax_rows, AttentionTensorPair, SequenceInput};
use crate::error::{Error, Result};
use crate::linalg::random_orthonormal;
use crate::math;
use crate::rng::SeededRng;
use crate::rope::{latent_rope_scores, rotate_row_in_place, RopeConfig};
use crate::tensor::{matricize, mode_product, Matrix, Tensor3};

/// Cores and factor matrices of the factorized attention pair.
#[derive(Debug, Clone)]
pub struct TuckerAttentionParams {
    /// Pre-softmax core, `r1 x r2 x r3`.
    pub core_pre: Tensor3,
    /// Post-softmax core, `rt1 x rt2 x rt3`.
    pub core_post: Tensor3,
    /// Head basis of the pre tensor, `n_heads x r1`.
    pub u1: Matrix,
    /// Query basis, `d_model x r2`.
    pub u2: Matrix,
    /// Key basis, `d_model x r3`.
    pub u3: Matrix,
    /// Head basis of the post tensor, `n_heads x rt1`.
    pub ut1: Matrix,
    /// Output basis, `d_model x rt2`.
    pub ut2: Matrix,
    /// Value basis, `d_model x rt3`; `None` shares `u3` (and then `rt3 == r3`).
    pub ut3: Option<Matrix>,
    /// The score divisor is `sqrt(scale_dim)`; conventionally the head
    /// dimension, configurable to the latent rank.
    pub scale_dim: f64,
}

impl TuckerAttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        core_pre: Tensor3,
        core_post: Tensor3,
        u1: Matrix,
        u2: Matrix,
        u3: Matrix,
        ut1: Matrix,
        ut2: Matrix,
        ut3: Option<Matrix>,
        scale_dim: f64,
    ) -> Result<Self> {
        let (r1, r2, r3) = core_pre.dims();
        let (rt1, rt2, rt3) = core_post.dims();
        let n_heads = u1.rows();
        let d_model = u2.rows();
        if u1.cols() != r1 || u2.cols() != r2 || u3.cols() != r3 {
            return Err(Error::ShapeMismatch(format!(
                "pre-side factors ({},{},{}) do not match core ranks {:?}",
                u1.cols(),
                u2.cols(),
                u3.cols(),
                core_pre.dims()
            )));
        }
        if ut1.cols() != rt1 || ut2.cols() != rt2 {
            return Err(Error::ShapeMismatch(format!(
                "post-side factors ({},{}) do not match core ranks {:?}",
                ut1.cols(),
                ut2.cols(),
                core_post.dims()
            )));
        }
        if ut1.rows() != n_heads || ut2.rows() != d_model || u3.rows() != d_model {
            return Err(Error::ShapeMismatch(
                "factor matrices disagree on head count or model dimension".into(),
            ));
        }
        match &ut3 {
            Some(m) => {
                if m.rows() != d_model || m.cols() != rt3 {
                    return Err(Error::ShapeMismatch(format!(
                        "value factor must be {d_model}x{rt3}, got {}x{}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
            None => {
                if rt3 != r3 {
                    return Err(Error::InvalidArgument(format!(
                        "shared key/value factor requires rt3 == r3, got {rt3} != {r3}"
                    )));
                }
            }
        }
        if r1 > n_heads
            || rt1 > n_heads
            || r2 > d_model
            || r3 > d_model
            || rt2 > d_model
            || rt3 > d_model
        {
            return Err(Error::InvalidArgument(
                "Tucker ranks must not exceed the mode dimensions".into(),
            ));
        }
        if !(scale_dim > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale dimension must be positive, got {scale_dim}"
            )));
        }
        Ok(Self {
            core_pre,
            core_post,
            u1,
            u2,
            u3,
            ut1,
            ut2,
            ut3,
            scale_dim,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.u1.rows()
    }

    pub fn d_model(&self) -> usize {
        self.u2.rows()
    }

    pub fn ranks_pre(&self) -> (usize, usize, usize) {
        self.core_pre.dims()
    }

    pub fn ranks_post(&self) -> (usize, usize, usize) {
        self.core_post.dims()
    }

    pub fn shared_kv(&self) -> bool {
        self.ut3.is_none()
    }

    /// The factor producing value rows; `u3` when shared.
    pub fn value_factor(&self) -> &Matrix {
        self.ut3.as_ref().unwrap_or(&self.u3)
    }

    /// Stored parameter entries (cores plus factor matrices).
    pub fn param_count(&self) -> u64 {
        let tensor = |t: &Tensor3| t.data().len() as u64;
        let matrix = |m: &Matrix| (m.rows() * m.cols()) as u64;
        tensor(&self.core_pre)
            + tensor(&self.core_post)
            + matrix(&self.u1)
            + matrix(&self.u2)
            + matrix(&self.u3)
            + matrix(&self.ut1)
            + matrix(&self.ut2)
            + self.ut3.as_ref().map(matrix).unwrap_or(0)
    }

    /// From-scratch initialization: orthonormal factor frames and i.i.d.
    /// cores scaled by `(r1 r2 r3)^(-1/2)` so score magnitudes start near
    /// those of an unfactored layer.
    pub fn random_init(
        n_heads: usize,
        d_model: usize,
        ranks_pre: (usize, usize, usize),
        ranks_post: (usize, usize, usize),
        shared_kv: bool,
        scale_dim: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let scaled_core = |dims: (usize, usize, usize), rng: &mut SeededRng| {
            let s = 1.0 / math::sqrt((dims.0 * dims.1 * dims.2) as f64);
            rng.normal_tensor(dims).scale(s)
        };
        let core_pre = scaled_core(ranks_pre, rng);
        let core_post = scaled_core(ranks_post, rng);
        let u1 = random_orthonormal(n_heads, ranks_pre.0, rng);
        let u2 = random_orthonormal(d_model, ranks_pre.1, rng);
        let u3 = random_orthonormal(d_model, ranks_pre.2, rng);
        let ut1 = random_orthonormal(n_heads, ranks_post.0, rng);
        let ut2 = random_orthonormal(d_model, ranks_post.1, rng);
        let ut3 = if shared_kv {
            None
        } else {
            Some(random_orthonormal(d_model, ranks_post.2, rng))
        };
        Self::new(core_pre, core_post, u1, u2, u3, ut1, ut2, ut3, scale_dim)
    }

    /// Per-head latent queries `core_pre x1 u1 x2 (x u2)`, shape
    /// `(heads, n, r3)`.
    pub fn latent_queries(&self, x: &Matrix) -> Result<Tensor3> {
        let projected = x.matmul(&self.u2);
        let t = mode_product(&self.core_pre, &self.u1, 1)?;
        mode_product(&t, &projected, 2)
    }

    /// Latent key rows `x u3`.
    pub fn latent_keys(&self, x: &Matrix) -> Matrix {
        x.matmul(&self.u3)
    }

    /// Latent value rows `x ut3` (or `x u3` when shared).
    pub fn latent_values(&self, x: &Matrix) -> Matrix {
        x.matmul(self.value_factor())
    }
}

/// Expand the factorization into the dense stacked tensor pair.
pub fn materialize(params: &TuckerAttentionParams) -> AttentionTensorPair {
    let expand = |core: &Tensor3, a: &Matrix, b: &Matrix, c: &Matrix| {
        let t = mode_product(core, a, 1).expect("head factor");
        let t = mode_product(&t, b, 2).expect("mode-2 factor");
        mode_product(&t, c, 3).expect("mode-3 factor")
    };
    AttentionTensorPair {
        w_pre: expand(&params.core_pre, &params.u1, &params.u2, &params.u3),
        w_post: expand(
            &params.core_post,
            &params.ut1,
            &params.ut2,
            params.value_factor(),
        ),
    }
}

/// Combine per-head weighted values through the post-softmax factorization:
/// given `t[i,m,g] = sum_n attn[i,m,n] v[n,g]`, returns
/// `(ut2 Mat2(core_post) Mat2(t x1 ut1^T)^T)^T`, an `n x d_model` output.
fn combine_heads(params: &TuckerAttentionParams, weighted_values: &Tensor3) -> Result<Matrix> {
    let projected = mode_product(weighted_values, &params.ut1.transpose(), 1)?;
    let core_flat = matricize(&params.core_post, 2)?;
    let proj_flat = matricize(&projected, 2)?;
    let e = core_flat.matmul_transposed(&proj_flat); // rt2 x n
    Ok(params.ut2.matmul(&e).transpose())
}

/// Factorized forward pass. Equals `tensor_mha_forward(materialize(params))`
/// when `rope` is absent; with `rope` the scores are rotated in the latent
/// key dimension at absolute positions `0..n`.
pub fn tucker_forward(
    params: &TuckerAttentionParams,
    input: &SequenceInput,
    rope: Option<&RopeConfig>,
) -> Result<Matrix> {
    if input.x.cols() != params.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match d_model {}",
            input.x.cols(),
            params.d_model()
        )));
    }
    let n = input.n_tokens();
    let q_hat = params.latent_queries(&input.x)?;
    let keys = params.latent_keys(&input.x);
    let values = params.latent_values(&input.x);

    let raw_scores = match rope {
        Some(cfg) => {
            let positions: Vec<i64> = (0..n as i64).collect();
            latent_rope_scores(&q_hat, &keys, cfg, &positions)?
        }
        None => {
            let (n_heads, _, _) = q_hat.dims();
            let mut s = Tensor3::zeros((n_heads, n, n));
            for i in 0..n_heads {
                let qi = q_hat.slice1(i); // n x r3
                s.set_slice1(i, &qi.matmul_transposed(&keys));
            }
            s
        }
    };

    let inv_scale = 1.0 / math::sqrt(params.scale_dim);
    let n_heads = params.n_heads();
    let rt3 = params.ranks_post().2;
    let mut weighted = Tensor3::zeros((n_heads, n, rt3));
    for i in 0..n_heads {
        let attn = softmax_rows(&raw_scores.slice1(i).scale(inv_scale), input.causal);
        weighted.set_slice1(i, &attn.matmul(&values));
    }
    combine_heads(params, &weighted)
}

/// Cached latent key/value rows for incremental decoding. Append-only; rows
/// are stored exactly as produced (`x u3`, `x ut3`), with the value rows
/// aliased to the key rows in shared mode.
#[derive(Debug, Clone)]
pub struct KvCache {
    k_data: Vec<f64>,
    v_data: Option<Vec<f64>>,
    r3: usize,
    rt3: usize,
    len: usize,
}

impl KvCache {
    pub fn new(params: &TuckerAttentionParams) -> Self {
        Self {
            k_data: Vec::new(),
            v_data: if params.shared_kv() {
                None
            } else {
                Some(Vec::new())
            },
            r3: params.ranks_pre().2,
            rt3: params.ranks_post().2,
            len: 0,
        }
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn key_row(&self, n: usize) -> &[f64] {
        &self.k_data[n * self.r3..(n + 1) * self.r3]
    }

    pub fn value_row(&self, n: usize) -> &[f64] {
        match &self.v_data {
            Some(v) => &v[n * self.rt3..(n + 1) * self.rt3],
            None => self.key_row(n),
        }
    }

    fn push(&mut self, k_row: Vec<f64>, v_row: Option<Vec<f64>>) {
        debug_assert_eq!(k_row.len(), self.r3);
        self.k_data.extend_from_slice(&k_row);
        if let Some(store) = &mut self.v_data {
            let v = v_row.expect("separated cache needs a value row");
            debug_assert_eq!(v.len(), self.rt3);
            store.extend_from_slice(&v);
        }
        self.len += 1;
    }

    /// Bytes held at the current length for a given element width.
    pub fn bytes(&self, bytes_per_value: u64) -> u64 {
        let per_token = self.r3 + if self.v_data.is_some() { self.rt3 } else { 0 };
        (self.len as u64) * (per_token as u64) * bytes_per_value
    }
}

/// Cache footprint in bytes per layer for `n_tokens` cached tokens:
/// `n (r3 + rt3) b` separated, `n r3 b` shared.
pub fn kv_cache_bytes(params: &TuckerAttentionParams, n_tokens: u64, bytes_per_value: u64) -> u64 {
    let per_token = if params.shared_kv() {
        params.ranks_pre().2 as u64
    } else {
        (params.ranks_pre().2 + params.ranks_post().2) as u64
    };
    n_tokens * per_token * bytes_per_value
}

/// Append token `position` to the cache and return that token's attention
/// output row, identical to the last row of the causal full forward over the
/// prefix.
pub fn decode_step(
    params: &TuckerAttentionParams,
    cache: &mut KvCache,
    x_last: &[f64],
    position: usize,
    rope: Option<&RopeConfig>,
) -> Result<Vec<f64>> {
    if x_last.len() != params.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "token width {} does not match d_model {}",
            x_last.len(),
            params.d_model()
        )));
    }
    if position != cache.len() {
        return Err(Error::State(format!(
            "decode position {position} does not match cache length {}",
            cache.len()
        )));
    }
    let x_row = Matrix::from_vec(1, x_last.len(), x_last.to_vec())?;

    let k_new = x_row.matmul(&params.u3).data().to_vec();
    let v_new = if params.shared_kv() {
        None
    } else {
        Some(x_row.matmul(params.value_factor()).data().to_vec())
    };
    cache.push(k_new, v_new);

    let q_hat = params.latent_queries(&x_row)?; // (heads, 1, r3)
    let n_heads = params.n_heads();
    let (_, _, r3) = q_hat.dims();
    let t = cache.len();

    if let Some(cfg) = rope {
        if cfg.dim() != r3 {
            return Err(Error::ShapeMismatch(format!(
                "rotary dimension {} does not match latent dimension {r3}",
                cfg.dim()
            )));
        }
    }

    // Per-head scores against every cached key, rotated when requested.
    let inv_scale = 1.0 / math::sqrt(params.scale_dim);
    let mut attn = Matrix::zeros(n_heads, t);
    let mut q_row = vec![0.0; r3];
    let mut k_row = vec![0.0; r3];
    for i in 0..n_heads {
        for (slot, qv) in q_row.iter_mut().enumerate() {
            *qv = q_hat.get(i, 0, slot);
        }
        if let Some(cfg) = rope {
            rotate_row_in_place(&mut q_row, cfg, position as i64);
        }
        for n in 0..t {
            k_row.copy_from_slice(cache.key_row(n));
            if let Some(cfg) = rope {
                rotate_row_in_place(&mut k_row, cfg, n as i64);
            }
            let mut s = 0.0;
            for (qv, kv) in q_row.iter().zip(&k_row) {
                s += qv * kv;
            }
            attn.set(i, n, s * inv_scale);
        }
    }
    let attn = softmax_rows(&attn, false);

    // weighted[i, 0, g] = sum_n attn[i,n] v[n,g]
    let rt3 = params.ranks_post().2;
    let mut weighted = Tensor3::zeros((n_heads, 1, rt3));
    for i in 0..n_heads {
        for n in 0..t {
            let w = attn.get(i, n);
            let v_row = cache.value_row(n);
            for (g, vv) in v_row.iter().enumerate() {
                let cur = weighted.get(i, 0, g);
                weighted.set(i, 0, g, cur + w * vv);
            }
        }
    }
    let out = combine_heads(params, &weighted)?;
    Ok(out.row(0).to_vec())
}

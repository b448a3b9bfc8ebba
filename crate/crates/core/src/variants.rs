//! Grouped-query and latent attention variants, plus their lifts back into
//! the stacked tensor pair.
//!
//! Each variant's forward pass is written in its native factored form; the
//! `*_lift` functions expand the effective per-head weights so the mode
//! ranks of the resulting pair can be checked against the closed-form
//! bounds: GQA caps the key/value mode at `n_kv * d_head`, MLA caps the
//! query and key modes at its latent dimensions, and none of them compress
//! the head mode.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{
    softmax_rows, stack_attention_tensors, AttentionTensorPair, MhaWeights, SequenceInput,
};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::SeededRng;
use crate::rope::{apply_rope_per_head, RopeConfig};
use crate::tensor::{Matrix, Tensor3};

/// Grouped-query attention weights: full query/output projections and
/// `n_kv` shared key/value blocks.
#[derive(Debug, Clone)]
pub struct GqaWeights {
    pub n_heads: usize,
    pub n_kv: usize,
    /// `d_model x d_model`, per-head column blocks.
    pub wq: Matrix,
    /// `n_kv` blocks of `d_model x d_head`.
    pub wk_groups: Vec<Matrix>,
    /// `n_kv` blocks of `d_model x d_head`.
    pub wv_groups: Vec<Matrix>,
    /// `d_model x d_model`, per-head row blocks.
    pub wo: Matrix,
}

impl GqaWeights {
    pub fn new(
        n_heads: usize,
        n_kv: usize,
        wq: Matrix,
        wk_groups: Vec<Matrix>,
        wv_groups: Vec<Matrix>,
        wo: Matrix,
    ) -> Result<Self> {
        if n_kv == 0 || n_heads % n_kv != 0 {
            return Err(Error::InvalidArgument(format!(
                "kv head count {n_kv} must divide query head count {n_heads}"
            )));
        }
        let d_model = wq.rows();
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "head count {n_heads} must divide d_model {d_model}"
            )));
        }
        let d_head = d_model / n_heads;
        if wk_groups.len() != n_kv || wv_groups.len() != n_kv {
            return Err(Error::ShapeMismatch(format!(
                "expected {n_kv} key and value blocks, got {} and {}",
                wk_groups.len(),
                wv_groups.len()
            )));
        }
        for m in wk_groups.iter().chain(&wv_groups) {
            if (m.rows(), m.cols()) != (d_model, d_head) {
                return Err(Error::ShapeMismatch(format!(
                    "kv blocks must be {d_model}x{d_head}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if (wo.rows(), wo.cols()) != (d_model, d_model) || wq.cols() != d_model {
            return Err(Error::ShapeMismatch(
                "query/output projections must be d_model x d_model".into(),
            ));
        }
        Ok(Self {
            n_heads,
            n_kv,
            wq,
            wk_groups,
            wv_groups,
            wo,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    /// KV group serving query head `i`: contiguous blocks of
    /// `n_heads / n_kv` heads.
    pub fn group_of(&self, head: usize) -> usize {
        head * self.n_kv / self.n_heads
    }

    pub fn param_count(&self) -> u64 {
        let d = self.d_model() as u64;
        2 * d * d + 2 * (self.n_kv as u64) * (self.d_head() as u64) * d
    }

    pub fn random(n_heads: usize, n_kv: usize, d_model: usize, rng: &mut SeededRng) -> Result<Self> {
        let scale = 1.0 / math::sqrt(d_model as f64);
        let d_head = d_model / n_heads.max(1);
        let block = |rng: &mut SeededRng| rng.normal_matrix(d_model, d_head).scale(scale);
        let wq = rng.normal_matrix(d_model, d_model).scale(scale);
        let wk_groups = (0..n_kv).map(|_| block(rng)).collect();
        let wv_groups = (0..n_kv).map(|_| block(rng)).collect();
        let wo = rng.normal_matrix(d_model, d_model).scale(scale);
        Self::new(n_heads, n_kv, wq, wk_groups, wv_groups, wo)
    }

    /// The plain multi-head weights obtained by duplicating each group's
    /// key/value block across its query heads.
    pub fn induced_mha(&self) -> MhaWeights {
        let d = self.d_model();
        let d_head = self.d_head();
        let mut wk = Matrix::zeros(d, d);
        let mut wv = Matrix::zeros(d, d);
        for i in 0..self.n_heads {
            let g = self.group_of(i);
            wk.set_col_block(i * d_head, &self.wk_groups[g]);
            wv.set_col_block(i * d_head, &self.wv_groups[g]);
        }
        MhaWeights::new(self.n_heads, self.wq.clone(), wk, wv, self.wo.clone())
            .expect("induced weights are consistent by construction")
    }
}

/// Grouped-query forward pass: standard attention with each head's key and
/// value taken from its group's shared block.
pub fn gqa_forward(w: &GqaWeights, input: &SequenceInput) -> Result<Matrix> {
    let d = w.d_model();
    if input.x.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match d_model {d}",
            input.x.cols()
        )));
    }
    let d_head = w.d_head();
    let scale = 1.0 / math::sqrt(d_head as f64);
    let n = input.n_tokens();
    let mut out = Matrix::zeros(n, d);
    // One key/value projection per group, reused by all heads in the group.
    let k_groups: Vec<Matrix> = w.wk_groups.iter().map(|b| input.x.matmul(b)).collect();
    let v_groups: Vec<Matrix> = w.wv_groups.iter().map(|b| input.x.matmul(b)).collect();
    for i in 0..w.n_heads {
        let g = w.group_of(i);
        let q = input.x.matmul(&w.wq.col_block(i * d_head, d_head));
        let scores = q.matmul_transposed(&k_groups[g]).scale(scale);
        let attn = softmax_rows(&scores, input.causal);
        let head = attn
            .matmul(&v_groups[g])
            .matmul(&w.wo.row_block(i * d_head, d_head));
        out = out.add(&head);
    }
    Ok(out)
}

/// Stacked tensor pair of the grouped-query layer.
pub fn gqa_lift(w: &GqaWeights) -> AttentionTensorPair {
    stack_attention_tensors(&w.induced_mha())
}

/// Latent attention weights: queries and keys/values factor through low
/// dimensional down projections with per-head up projections; the output
/// projection stays full rank.
#[derive(Debug, Clone)]
pub struct MlaWeights {
    pub n_heads: usize,
    pub d_head: usize,
    /// Query down projection, `d_model x d_cq`.
    pub w_dq: Matrix,
    /// Per-head query up projections, `d_cq x d_head`.
    pub w_uq: Vec<Matrix>,
    /// Key (and shared value) down projection, `d_model x d_ck`.
    pub w_dkv: Matrix,
    /// Per-head key up projections, `d_ck x d_head`.
    pub w_uk: Vec<Matrix>,
    /// Per-head value up projections, `d_ck x d_head`.
    pub w_uv: Vec<Matrix>,
    /// Separated value down projection; `None` reuses `w_dkv`.
    pub w_dv: Option<Matrix>,
    /// Output projection, `d_model x d_model`, per-head row blocks.
    pub wo: Matrix,
}

impl MlaWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_heads: usize,
        w_dq: Matrix,
        w_uq: Vec<Matrix>,
        w_dkv: Matrix,
        w_uk: Vec<Matrix>,
        w_uv: Vec<Matrix>,
        w_dv: Option<Matrix>,
        wo: Matrix,
    ) -> Result<Self> {
        let d_model = w_dq.rows();
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "head count {n_heads} must divide d_model {d_model}"
            )));
        }
        let d_head = d_model / n_heads;
        let d_cq = w_dq.cols();
        let d_ck = w_dkv.cols();
        if d_cq > d_model || d_ck > d_model {
            return Err(Error::InvalidArgument(format!(
                "latent dimensions ({d_cq}, {d_ck}) must not exceed d_model {d_model}"
            )));
        }
        if w_dkv.rows() != d_model {
            return Err(Error::ShapeMismatch("key down projection height must be d_model".into()));
        }
        if w_uq.len() != n_heads || w_uk.len() != n_heads || w_uv.len() != n_heads {
            return Err(Error::ShapeMismatch(
                "up projection lists must have one entry per head".into(),
            ));
        }
        for m in &w_uq {
            if (m.rows(), m.cols()) != (d_cq, d_head) {
                return Err(Error::ShapeMismatch(format!(
                    "query up projections must be {d_cq}x{d_head}"
                )));
            }
        }
        for m in w_uk.iter().chain(&w_uv) {
            if (m.rows(), m.cols()) != (d_ck, d_head) {
                return Err(Error::ShapeMismatch(format!(
                    "key/value up projections must be {d_ck}x{d_head}"
                )));
            }
        }
        if let Some(dv) = &w_dv {
            if (dv.rows(), dv.cols()) != (d_model, d_ck) {
                return Err(Error::ShapeMismatch(format!(
                    "value down projection must be {d_model}x{d_ck}"
                )));
            }
        }
        if (wo.rows(), wo.cols()) != (d_model, d_model) {
            return Err(Error::ShapeMismatch("output projection must be d_model x d_model".into()));
        }
        Ok(Self {
            n_heads,
            d_head,
            w_dq,
            w_uq,
            w_dkv,
            w_uk,
            w_uv,
            w_dv,
            wo,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_dq.rows()
    }

    pub fn d_cq(&self) -> usize {
        self.w_dq.cols()
    }

    pub fn d_ck(&self) -> usize {
        self.w_dkv.cols()
    }

    pub fn shared_kv(&self) -> bool {
        self.w_dv.is_none()
    }

    /// Down projection feeding the value path.
    pub fn value_down(&self) -> &Matrix {
        self.w_dv.as_ref().unwrap_or(&self.w_dkv)
    }

    pub fn param_count(&self) -> u64 {
        let d = self.d_model() as u64;
        let (cq, ck) = (self.d_cq() as u64, self.d_ck() as u64);
        let dh = self.d_head as u64;
        let nh = self.n_heads as u64;
        d * cq                      // w_dq
            + nh * cq * dh          // w_uq
            + d * ck                // w_dkv
            + 2 * nh * ck * dh      // w_uk, w_uv
            + self.w_dv.as_ref().map(|_| d * ck).unwrap_or(0)
            + d * d // wo
    }

    pub fn random(
        n_heads: usize,
        d_model: usize,
        d_cq: usize,
        d_ck: usize,
        shared: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d_head = d_model / n_heads.max(1);
        let s_down = 1.0 / math::sqrt(d_model as f64);
        let w_dq = rng.normal_matrix(d_model, d_cq).scale(s_down);
        let w_dkv = rng.normal_matrix(d_model, d_ck).scale(s_down);
        let w_uq = (0..n_heads)
            .map(|_| rng.normal_matrix(d_cq, d_head).scale(1.0 / math::sqrt(d_cq as f64)))
            .collect();
        let up = |rng: &mut SeededRng| {
            rng.normal_matrix(d_ck, d_head)
                .scale(1.0 / math::sqrt(d_ck as f64))
        };
        let w_uk = (0..n_heads).map(|_| up(rng)).collect();
        let w_uv = (0..n_heads).map(|_| up(rng)).collect();
        let w_dv = if shared {
            None
        } else {
            Some(rng.normal_matrix(d_model, d_ck).scale(s_down))
        };
        let wo = rng.normal_matrix(d_model, d_model).scale(s_down);
        Self::new(n_heads, w_dq, w_uq, w_dkv, w_uk, w_uv, w_dv, wo)
    }

    /// Compose the factors into plain multi-head weights.
    pub fn induced_mha(&self) -> MhaWeights {
        let d = self.d_model();
        let d_head = self.d_head;
        let mut wq = Matrix::zeros(d, d);
        let mut wk = Matrix::zeros(d, d);
        let mut wv = Matrix::zeros(d, d);
        for i in 0..self.n_heads {
            wq.set_col_block(i * d_head, &self.w_dq.matmul(&self.w_uq[i]));
            wk.set_col_block(i * d_head, &self.w_dkv.matmul(&self.w_uk[i]));
            wv.set_col_block(i * d_head, &self.value_down().matmul(&self.w_uv[i]));
        }
        MhaWeights::new(self.n_heads, wq, wk, wv, self.wo.clone())
            .expect("induced weights are consistent by construction")
    }
}

/// Extra rotational weights for the decoupled positional path of a latent
/// attention layer: a narrow per-head query/key pair scored with per-head
/// rotary embeddings and added to the semantic scores.
#[derive(Debug, Clone)]
pub struct MlaDecoupledRope {
    /// Per-head rotational query maps, `d_model x d_rot`.
    pub wq_rot: Vec<Matrix>,
    /// Per-head rotational key maps, `d_model x d_rot`.
    pub wk_rot: Vec<Matrix>,
    pub cfg: RopeConfig,
}

/// Default rotational width for the decoupled split: half the head
/// dimension, rounded down to an even count.
pub fn default_rot_width(d_head: usize) -> usize {
    (d_head / 2) & !1
}

impl MlaDecoupledRope {
    /// Random rotational weights at width `d_rot`; see [`default_rot_width`]
    /// for the conventional choice.
    pub fn random(n_heads: usize, d_model: usize, d_rot: usize, rng: &mut SeededRng) -> Result<Self> {
        let cfg = RopeConfig::with_default_base(d_rot)?;
        let s = 1.0 / math::sqrt(d_model as f64);
        Ok(Self {
            wq_rot: (0..n_heads).map(|_| rng.normal_matrix(d_model, d_rot).scale(s)).collect(),
            wk_rot: (0..n_heads).map(|_| rng.normal_matrix(d_model, d_rot).scale(s)).collect(),
            cfg,
        })
    }
}

/// Positional treatment for the latent attention forward pass.
#[derive(Clone, Copy)]
pub enum MlaRopeMode<'a> {
    /// No positional rotation.
    None,
    /// Rotation in the latent key dimension; the rotary dimension must equal
    /// `d_ck`.
    Latent(&'a RopeConfig),
    /// Per-head rotation on an extra narrow channel pair added to the
    /// semantic scores.
    Decoupled(&'a MlaDecoupledRope),
}

/// Unfused latent-attention forward pass: per-head queries, keys, and values
/// are built through the down/up factor chain and scored like standard
/// attention at `sqrt(d_head)` scale.
pub fn mla_forward_unfused(
    w: &MlaWeights,
    input: &SequenceInput,
    mode: MlaRopeMode<'_>,
) -> Result<Matrix> {
    let d = w.d_model();
    if input.x.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match d_model {d}",
            input.x.cols()
        )));
    }
    if let MlaRopeMode::Latent(cfg) = mode {
        if cfg.dim() != w.d_ck() {
            return Err(Error::ShapeMismatch(format!(
                "rotary dimension {} does not match latent key dimension {}",
                cfg.dim(),
                w.d_ck()
            )));
        }
    }
    let n = input.n_tokens();
    let positions: Vec<i64> = (0..n as i64).collect();
    let scale = 1.0 / math::sqrt(w.d_head as f64);
    let q_latent_shared = input.x.matmul(&w.w_dq); // n x d_cq
    let k_latent = input.x.matmul(&w.w_dkv); // n x d_ck
    let v_latent = input.x.matmul(w.value_down()); // n x d_ck
    let mut out = Matrix::zeros(n, d);
    for i in 0..w.n_heads {
        let scores = match mode {
            MlaRopeMode::None => {
                let q = q_latent_shared.matmul(&w.w_uq[i]);
                let k = k_latent.matmul(&w.w_uk[i]);
                q.matmul_transposed(&k)
            }
            MlaRopeMode::Latent(cfg) => {
                // Queries pulled back into the key latent space through the
                // key up projection, then both sides rotated there.
                let q_lat = q_latent_shared
                    .matmul(&w.w_uq[i])
                    .matmul_transposed(&w.w_uk[i]);
                let q_rot = apply_rope_per_head(&q_lat, cfg, &positions)?;
                let k_rot = apply_rope_per_head(&k_latent, cfg, &positions)?;
                q_rot.matmul_transposed(&k_rot)
            }
            MlaRopeMode::Decoupled(rot) => {
                let q = q_latent_shared.matmul(&w.w_uq[i]);
                let k = k_latent.matmul(&w.w_uk[i]);
                let sem = q.matmul_transposed(&k);
                let q_rot = apply_rope_per_head(&input.x.matmul(&rot.wq_rot[i]), &rot.cfg, &positions)?;
                let k_rot = apply_rope_per_head(&input.x.matmul(&rot.wk_rot[i]), &rot.cfg, &positions)?;
                sem.add(&q_rot.matmul_transposed(&k_rot))
            }
        };
        let attn = softmax_rows(&scores.scale(scale), input.causal);
        let head = attn
            .matmul(&v_latent.matmul(&w.w_uv[i]))
            .matmul(&w.wo.row_block(i * w.d_head, w.d_head));
        out = out.add(&head);
    }
    Ok(out)
}

/// Inference-time fusion of the query-side chain: one `d_model x d_ck` map
/// per head sending tokens straight into the rotated latent key space.
#[derive(Debug, Clone)]
pub struct MlaFusedQueries {
    pub maps: Vec<Matrix>,
}

/// Fuse `w_dq w_uq_i w_uk_i^T` per head. The composition runs through the
/// key up-projection transpose so the result lands in the `d_ck`-dimensional
/// space where the cached latents and the latent rotation live.
pub fn mla_fuse(w: &MlaWeights) -> MlaFusedQueries {
    let maps = (0..w.n_heads)
        .map(|i| w.w_dq.matmul(&w.w_uq[i]).matmul_transposed(&w.w_uk[i]))
        .collect();
    MlaFusedQueries { maps }
}

/// Latent-attention forward with fused query maps; with `rope` set this is
/// the single-projection latent-rotation evaluation and matches
/// [`mla_forward_unfused`] in latent mode.
pub fn mla_forward_fused(
    w: &MlaWeights,
    fused: &MlaFusedQueries,
    input: &SequenceInput,
    rope: Option<&RopeConfig>,
) -> Result<Matrix> {
    let d = w.d_model();
    if input.x.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match d_model {d}",
            input.x.cols()
        )));
    }
    if fused.maps.len() != w.n_heads {
        return Err(Error::ShapeMismatch("one fused query map per head required".into()));
    }
    if let Some(cfg) = rope {
        if cfg.dim() != w.d_ck() {
            return Err(Error::ShapeMismatch(format!(
                "rotary dimension {} does not match latent key dimension {}",
                cfg.dim(),
                w.d_ck()
            )));
        }
    }
    let n = input.n_tokens();
    let positions: Vec<i64> = (0..n as i64).collect();
    let scale = 1.0 / math::sqrt(w.d_head as f64);
    let k_latent = input.x.matmul(&w.w_dkv);
    let k_scored = match rope {
        Some(cfg) => apply_rope_per_head(&k_latent, cfg, &positions)?,
        None => k_latent.clone(),
    };
    let v_latent = input.x.matmul(w.value_down());
    let mut out = Matrix::zeros(n, d);
    for i in 0..w.n_heads {
        let q_lat = input.x.matmul(&fused.maps[i]);
        let q_scored = match rope {
            Some(cfg) => apply_rope_per_head(&q_lat, cfg, &positions)?,
            None => q_lat,
        };
        let attn = softmax_rows(&q_scored.matmul_transposed(&k_scored).scale(scale), input.causal);
        let head = attn
            .matmul(&v_latent.matmul(&w.w_uv[i]))
            .matmul(&w.wo.row_block(i * w.d_head, w.d_head));
        out = out.add(&head);
    }
    Ok(out)
}

/// Stacked tensor pair of the latent attention layer.
pub fn mla_lift(w: &MlaWeights) -> AttentionTensorPair {
    stack_attention_tensors(&w.induced_mha())
}

/// The selector core that factors the stacked pre-softmax tensor through the
/// full (head-blocked) query and key matrices: slice `i` is zero except for
/// ones on the diagonal positions belonging to head `i`'s column block, so
/// `core x2 Wq x3 Wk` rebuilds the stacked per-head products.
pub fn canonical_core(n_heads: usize, d_model: usize, d_head: usize) -> Result<Tensor3> {
    if n_heads * d_head != d_model {
        return Err(Error::InvalidArgument(format!(
            "head blocking requires n_heads * d_head == d_model, got {n_heads}*{d_head} != {d_model}"
        )));
    }
    let mut core = Tensor3::zeros((n_heads, d_model, d_model));
    for i in 0..n_heads {
        for l in 0..d_head {
            let p = i * d_head + l;
            core.set(i, p, p, 1.0);
        }
    }
    Ok(core)
}

//! Rotary position embeddings: per-head rotation matrices, their latent-space
//! variant acting in the compressed key dimension, and the decoupled
//! semantic/rotational split.
//!
//! `rope_matrix(cfg, p)` is block-diagonal with 2x2 rotations of angle
//! `p * base^(-2j/dim)` on adjacent coordinate pairs. Because the blocks form
//! a rotation group, `R(m) R(n)^T = R(m - n)`, which is what makes every
//! score in this module depend on relative position only.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Matrix, Tensor3};

/// Rotation dimension and frequency base for rotary embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    dim: usize,
    base: f64,
}

/// The conventional frequency base.
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

impl RopeConfig {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rotary dimension must be even, got {dim}"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rotary base must be positive, got {base}"
            )));
        }
        Ok(Self { dim, base })
    }

    pub fn with_default_base(dim: usize) -> Result<Self> {
        Self::new(dim, DEFAULT_ROPE_BASE)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Rotation angle of block `j` at position `pos`.
    fn angle(&self, pos: i64, j: usize) -> f64 {
        let freq = math::powf(self.base, -2.0 * j as f64 / self.dim as f64);
        pos as f64 * freq
    }
}

/// The dim x dim rotation matrix at position `pos`: 2x2 blocks
/// `[[cos, -sin], [sin, cos]]` on coordinate pairs `(2j, 2j+1)`.
pub fn rope_matrix(cfg: &RopeConfig, pos: i64) -> Matrix {
    let mut r = Matrix::zeros(cfg.dim, cfg.dim);
    for j in 0..cfg.dim / 2 {
        let theta = cfg.angle(pos, j);
        let (c, s) = (math::cos(theta), math::sin(theta));
        r.set(2 * j, 2 * j, c);
        r.set(2 * j, 2 * j + 1, -s);
        r.set(2 * j + 1, 2 * j, s);
        r.set(2 * j + 1, 2 * j + 1, c);
    }
    r
}

/// Right-multiply a row vector by the rotation at `pos`, in place.
pub fn rotate_row_in_place(row: &mut [f64], cfg: &RopeConfig, pos: i64) {
    debug_assert_eq!(row.len(), cfg.dim);
    for j in 0..cfg.dim / 2 {
        let theta = cfg.angle(pos, j);
        let (c, s) = (math::cos(theta), math::sin(theta));
        let a = row[2 * j];
        let b = row[2 * j + 1];
        // (x R)_2j = a cos + b sin, (x R)_{2j+1} = -a sin + b cos
        row[2 * j] = a * c + b * s;
        row[2 * j + 1] = -a * s + b * c;
    }
}

/// Rotate each row of a query/key block by its position's rotation matrix.
pub fn apply_rope_per_head(rows: &Matrix, cfg: &RopeConfig, positions: &[i64]) -> Result<Matrix> {
    if rows.rows() != positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} positions",
            rows.rows(),
            positions.len()
        )));
    }
    if rows.cols() != cfg.dim {
        return Err(Error::ShapeMismatch(format!(
            "row width {} does not match rotary dimension {}",
            rows.cols(),
            cfg.dim
        )));
    }
    let mut out = rows.clone();
    for (r, &pos) in positions.iter().enumerate() {
        rotate_row_in_place(out.row_mut(r), cfg, pos);
    }
    Ok(out)
}

/// Position-aware scores in the latent key dimension.
///
/// `q_hat` holds per-head latent queries `(heads, n, r3)` and `k` the shared
/// latent keys `(n, r3)`. Entry `(i, m, n)` is the rotated inner product
/// `(q_hat[i,m] R(pos_m)) . (k[n] R(pos_n))`, i.e. the key row is rotated by
/// `R(pos_n) R(pos_m)^T` relative to the query.
pub fn latent_rope_scores(
    q_hat: &Tensor3,
    k: &Matrix,
    cfg: &RopeConfig,
    positions: &[i64],
) -> Result<Tensor3> {
    let (n_heads, n_q, r3) = q_hat.dims();
    if k.cols() != r3 {
        return Err(Error::ShapeMismatch(format!(
            "latent key width {} does not match query latent dimension {r3}",
            k.cols()
        )));
    }
    if cfg.dim != r3 {
        return Err(Error::ShapeMismatch(format!(
            "rotary dimension {} does not match latent dimension {r3}",
            cfg.dim
        )));
    }
    if n_q != k.rows() || positions.len() != n_q {
        return Err(Error::ShapeMismatch(format!(
            "queries ({n_q}), keys ({}), and positions ({}) must agree in length",
            k.rows(),
            positions.len()
        )));
    }
    let rotated_k = apply_rope_per_head(k, cfg, positions)?;
    let mut scores = Tensor3::zeros((n_heads, n_q, n_q));
    let mut q_row = alloc::vec![0.0; r3];
    for i in 0..n_heads {
        for m in 0..n_q {
            for (t, qv) in q_row.iter_mut().enumerate() {
                *qv = q_hat.get(i, m, t);
            }
            rotate_row_in_place(&mut q_row, cfg, positions[m]);
            for n in 0..n_q {
                let mut s = 0.0;
                for (t, qv) in q_row.iter().enumerate() {
                    s += qv * rotated_k.get(n, t);
                }
                scores.set(i, m, n, s);
            }
        }
    }
    Ok(scores)
}

/// Per-head weights for the decoupled split: a semantic block scored without
/// positions and a rotational block scored with per-head rotary embeddings.
#[derive(Debug, Clone)]
pub struct DecoupledWeights {
    /// Per-head semantic query maps, `d_model x d_sem`.
    pub wq_sem: Vec<Matrix>,
    /// Per-head semantic key maps, `d_model x d_sem`.
    pub wk_sem: Vec<Matrix>,
    /// Per-head rotational query maps, `d_model x d_rot`.
    pub wq_rot: Vec<Matrix>,
    /// Per-head rotational key maps, `d_model x d_rot`.
    pub wk_rot: Vec<Matrix>,
}

impl DecoupledWeights {
    pub fn n_heads(&self) -> usize {
        self.wq_sem.len()
    }

    pub fn d_rot(&self) -> usize {
        self.wq_rot.first().map(|m| m.cols()).unwrap_or(0)
    }
}

/// Raw (unscaled) per-head scores of the decoupled split:
/// `A_i = Qsem_i Ksem_i^T + rot(Qrot_i) rot(Krot_i)^T`.
pub fn decoupled_rope_scores(
    w: &DecoupledWeights,
    x: &Matrix,
    cfg: &RopeConfig,
    positions: &[i64],
) -> Result<Tensor3> {
    let n_heads = w.n_heads();
    if w.wk_sem.len() != n_heads || w.wq_rot.len() != n_heads || w.wk_rot.len() != n_heads {
        return Err(Error::ShapeMismatch(
            "decoupled weight lists must have one entry per head".into(),
        ));
    }
    if cfg.dim != w.d_rot() {
        return Err(Error::ShapeMismatch(format!(
            "rotary dimension {} does not match rotational width {}",
            cfg.dim,
            w.d_rot()
        )));
    }
    let n = x.rows();
    if positions.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} tokens but {} positions",
            positions.len()
        )));
    }
    let mut scores = Tensor3::zeros((n_heads, n, n));
    for i in 0..n_heads {
        let sem = x.matmul(&w.wq_sem[i]).matmul_transposed(&x.matmul(&w.wk_sem[i]));
        let rot = if cfg.dim == 0 {
            Matrix::zeros(n, n)
        } else {
            let q = apply_rope_per_head(&x.matmul(&w.wq_rot[i]), cfg, positions)?;
            let k = apply_rope_per_head(&x.matmul(&w.wk_rot[i]), cfg, positions)?;
            q.matmul_transposed(&k)
        };
        scores.set_slice1(i, &sem.add(&rot));
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use alloc::vec;

    #[test]
    fn rope_matrix_at_zero_is_identity() {
        let cfg = RopeConfig::with_default_base(6).unwrap();
        assert!(rope_matrix(&cfg, 0).max_abs_diff(&Matrix::identity(6)) < 1e-15);
    }

    #[test]
    fn rope_matrix_dim_two_is_planar_rotation() {
        let cfg = RopeConfig::new(2, 123.0).unwrap();
        let r = rope_matrix(&cfg, 1);
        let (c, s) = (libm::cos(1.0), libm::sin(1.0));
        assert!((r.get(0, 0) - c).abs() < 1e-15);
        assert!((r.get(0, 1) + s).abs() < 1e-15);
        assert!((r.get(1, 0) - s).abs() < 1e-15);
        assert!((r.get(1, 1) - c).abs() < 1e-15);
    }

    #[test]
    fn rope_matrix_is_orthogonal() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        for &p in &[0i64, 1, 7, -4, 33] {
            let r = rope_matrix(&cfg, p);
            assert!(r.matmul_transposed(&r).max_abs_diff(&Matrix::identity(8)) < 1e-12);
        }
    }

    #[test]
    fn rope_group_property() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        for &(m, n) in &[(3i64, 1i64), (10, 25), (7, 7), (0, 13), (40, 2)] {
            let lhs = rope_matrix(&cfg, m).matmul_transposed(&rope_matrix(&cfg, n));
            let rhs = rope_matrix(&cfg, m - n);
            assert!(lhs.max_abs_diff(&rhs) < 1e-12, "m={m} n={n}");
        }
    }

    #[test]
    fn rope_config_rejects_odd_dim_and_bad_base() {
        assert!(RopeConfig::new(5, 10_000.0).is_err());
        assert!(RopeConfig::new(4, 0.0).is_err());
        assert!(RopeConfig::new(4, -1.0).is_err());
    }

    #[test]
    fn apply_at_zero_positions_is_identity() {
        let mut rng = SeededRng::new(1);
        let cfg = RopeConfig::with_default_base(6).unwrap();
        let rows = rng.normal_matrix(4, 6);
        let out = apply_rope_per_head(&rows, &cfg, &[0; 4]).unwrap();
        assert!(out.max_abs_diff(&rows) < 1e-15);
    }

    #[test]
    fn apply_preserves_row_norms() {
        let mut rng = SeededRng::new(2);
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let rows = rng.normal_matrix(5, 8);
        let out = apply_rope_per_head(&rows, &cfg, &[0, 3, 11, 64, 200]).unwrap();
        for r in 0..5 {
            let a: f64 = rows.row(r).iter().map(|v| v * v).sum();
            let b: f64 = out.row(r).iter().map(|v| v * v).sum();
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_rejects_mismatches() {
        let cfg = RopeConfig::with_default_base(6).unwrap();
        let rows = Matrix::zeros(4, 6);
        assert!(apply_rope_per_head(&rows, &cfg, &[0; 3]).is_err());
        let wide = Matrix::zeros(4, 8);
        assert!(apply_rope_per_head(&wide, &cfg, &[0; 4]).is_err());
    }

    // Rotating queries and keys by their positions makes the score depend on
    // relative position only: shifting every position by s changes nothing.
    #[test]
    fn per_head_scores_are_shift_invariant() {
        let mut rng = SeededRng::new(3);
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let q = rng.normal_matrix(6, 8);
        let k = rng.normal_matrix(6, 8);
        let base_pos: Vec<i64> = (0..6).collect();
        let score = |shift: i64| {
            let pos: Vec<i64> = base_pos.iter().map(|p| p + shift).collect();
            let qr = apply_rope_per_head(&q, &cfg, &pos).unwrap();
            let kr = apply_rope_per_head(&k, &cfg, &pos).unwrap();
            qr.matmul_transposed(&kr)
        };
        let s0 = score(0);
        for &s in &[1i64, 5, 17] {
            assert!(score(s).max_abs_diff(&s0) < 1e-12);
        }
    }

    #[test]
    fn latent_scores_at_zero_positions_are_plain_inner_products() {
        let mut rng = SeededRng::new(4);
        let cfg = RopeConfig::with_default_base(6).unwrap();
        let q_hat = rng.normal_tensor((2, 5, 6));
        let k = rng.normal_matrix(5, 6);
        let scores = latent_rope_scores(&q_hat, &k, &cfg, &[0; 5]).unwrap();
        for i in 0..2 {
            for m in 0..5 {
                for n in 0..5 {
                    let mut want = 0.0;
                    for t in 0..6 {
                        want += q_hat.get(i, m, t) * k.get(n, t);
                    }
                    assert!((scores.get(i, m, n) - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn latent_scores_shift_invariant() {
        let mut rng = SeededRng::new(5);
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let q_hat = rng.normal_tensor((3, 7, 8));
        let k = rng.normal_matrix(7, 8);
        let base: Vec<i64> = (0..7).collect();
        let s0 = latent_rope_scores(&q_hat, &k, &cfg, &base).unwrap();
        for &s in &[1i64, 3, 17] {
            let pos: Vec<i64> = base.iter().map(|p| p + s).collect();
            let sr = latent_rope_scores(&q_hat, &k, &cfg, &pos).unwrap();
            assert!(sr.max_abs_diff(&s0) < 1e-12, "shift {s}");
        }
    }

    // Rotating both sides must agree with rotating the key row alone by
    // R(n) R(m)^T, evaluated here through explicit rotation matrices.
    #[test]
    fn latent_scores_match_rotate_key_only_form() {
        let mut rng = SeededRng::new(6);
        let cfg = RopeConfig::with_default_base(6).unwrap();
        let q_hat = rng.normal_tensor((2, 4, 6));
        let k = rng.normal_matrix(4, 6);
        let pos: Vec<i64> = vec![0, 2, 5, 9];
        let scores = latent_rope_scores(&q_hat, &k, &cfg, &pos).unwrap();
        for i in 0..2 {
            for m in 0..4 {
                for n in 0..4 {
                    let kn = Matrix::from_vec(1, 6, k.row(n).to_vec()).unwrap();
                    let w = kn
                        .matmul(&rope_matrix(&cfg, pos[n]))
                        .matmul(&rope_matrix(&cfg, pos[m]).transpose());
                    let mut want = 0.0;
                    for t in 0..6 {
                        want += q_hat.get(i, m, t) * w.get(0, t);
                    }
                    assert!((scores.get(i, m, n) - want).abs() < 1e-12);
                }
            }
        }
    }

    fn random_decoupled(n_heads: usize, d: usize, d_sem: usize, d_rot: usize, rng: &mut SeededRng) -> DecoupledWeights {
        DecoupledWeights {
            wq_sem: (0..n_heads).map(|_| rng.normal_matrix(d, d_sem)).collect(),
            wk_sem: (0..n_heads).map(|_| rng.normal_matrix(d, d_sem)).collect(),
            wq_rot: (0..n_heads).map(|_| rng.normal_matrix(d, d_rot)).collect(),
            wk_rot: (0..n_heads).map(|_| rng.normal_matrix(d, d_rot)).collect(),
        }
    }

    #[test]
    fn decoupled_zero_rot_width_is_purely_semantic() {
        let mut rng = SeededRng::new(7);
        let w = random_decoupled(2, 8, 4, 0, &mut rng);
        let x = rng.normal_matrix(5, 8);
        let cfg = RopeConfig::with_default_base(0).unwrap();
        let got = decoupled_rope_scores(&w, &x, &cfg, &(0..5).collect::<Vec<_>>()).unwrap();
        for i in 0..2 {
            let want = x.matmul(&w.wq_sem[i]).matmul_transposed(&x.matmul(&w.wk_sem[i]));
            assert!(got.slice1(i).max_abs_diff(&want) < 1e-13);
        }
    }

    #[test]
    fn decoupled_zero_semantic_is_shift_invariant() {
        let mut rng = SeededRng::new(8);
        let mut w = random_decoupled(2, 8, 4, 4, &mut rng);
        for m in w.wq_sem.iter_mut().chain(w.wk_sem.iter_mut()) {
            *m = Matrix::zeros(8, 4);
        }
        let x = rng.normal_matrix(5, 8);
        let cfg = RopeConfig::with_default_base(4).unwrap();
        let base: Vec<i64> = (0..5).collect();
        let s0 = decoupled_rope_scores(&w, &x, &cfg, &base).unwrap();
        let shifted: Vec<i64> = base.iter().map(|p| p + 9).collect();
        let s1 = decoupled_rope_scores(&w, &x, &cfg, &shifted).unwrap();
            assert!(s1.max_abs_diff(&s0) < 1e-12);
    }

    // Two-path oracle: the sum decomposition must equal independently
    // computed semantic and rotational addends.
    #[test]
    fn decoupled_sum_decomposition() {
        let mut rng = SeededRng::new(9);
        let w = random_decoupled(3, 8, 5, 4, &mut rng);
        let x = rng.normal_matrix(6, 8);
        let cfg = RopeConfig::with_default_base(4).unwrap();
        let pos: Vec<i64> = (0..6).collect();
        let got = decoupled_rope_scores(&w, &x, &cfg, &pos).unwrap();
        for i in 0..3 {
            let sem = x.matmul(&w.wq_sem[i]).matmul_transposed(&x.matmul(&w.wk_sem[i]));
            let qr = apply_rope_per_head(&x.matmul(&w.wq_rot[i]), &cfg, &pos).unwrap();
            let kr = apply_rope_per_head(&x.matmul(&w.wk_rot[i]), &cfg, &pos).unwrap();
            let want = sem.add(&qr.matmul_transposed(&kr));
            assert!(got.slice1(i).max_abs_diff(&want) < 1e-12);
        }
    }
}

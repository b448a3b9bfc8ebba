//! Matrix factorizations: SVD, truncated SVD, numerical rank, and the
//! higher-order SVD used to build Tucker factorizations.
//!
//! The SVD is a one-sided Jacobi iteration (with a Householder QR
//! pre-reduction for strongly rectangular inputs), chosen for its accuracy
//! at dense desk scale and for being fully deterministic: fixed sweep order,
//! stable descending sort, and a fixed sign convention make repeated calls
//! bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{matricize, mode_product, Matrix, Tensor3};

/// Thin singular value decomposition `m = u * diag(s) * v^T`.
///
/// `u` is `rows x k` and `v` is `cols x k` with `k = min(rows, cols)`; both
/// have orthonormal columns, `s` is nonincreasing and nonnegative. In each
/// column of `u` the entry of largest magnitude is nonnegative.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, sv) in self.s.iter().enumerate() {
                us.set(r, c, us.get(r, c) * sv);
            }
        }
        us.matmul_transposed(&self.v)
    }

    /// sqrt(sum of squared singular values past the first `r`).
    pub fn tail_energy(&self, r: usize) -> f64 {
        math::sqrt(self.s.iter().skip(r).map(|v| v * v).sum())
    }
}

/// Full (thin) SVD. Fails on non-finite input.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::InvalidArgument(
            "svd requires finite entries".into(),
        ));
    }
    let mut out = if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose());
        Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    apply_sign_convention(&mut out);
    Ok(out)
}

/// Best rank-`r` factors of `m`, i.e. the leading `r` singular triplets.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<Svd> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {r} out of range 1..={k}"
        )));
    }
    let full = svd(m)?;
    Ok(Svd {
        u: full.u.col_block(0, r),
        s: full.s[..r].to_vec(),
        v: full.v.col_block(0, r),
    })
}

/// Number of singular values above `tol * s_max`. Zero matrices have rank 0.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rank tolerance must be positive, got {tol}"
        )));
    }
    let s = svd(m)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&v| v > tol * smax).count())
}

/// Default relative tolerance separating algebraic rank deficiency from
/// f64 round-off.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

// --- Jacobi SVD internals ---------------------------------------------------

/// One-sided Jacobi on a matrix with rows >= cols, with a QR pre-reduction
/// when the aspect ratio is large. No sign convention applied here.
fn svd_tall(a: &Matrix) -> Svd {
    debug_assert!(a.rows() >= a.cols());
    if a.cols() > 0 && a.rows() > 2 * a.cols() {
        let (q, r) = householder_qr(a);
        let inner = jacobi_svd(&r);
        Svd {
            u: q.matmul(&inner.u),
            s: inner.s,
            v: inner.v,
        }
    } else {
        jacobi_svd(a)
    }
}

/// One-sided Jacobi: orthogonalize the columns of `a` by plane rotations.
/// On exit the column norms are the singular values, the normalized columns
/// are `u`, and the accumulated rotations are `v`.
fn jacobi_svd(a: &Matrix) -> Svd {
    let m = a.rows();
    let n = a.cols();
    let mut w = a.clone();
    let mut v = Matrix::identity(n);

    let tol = 1e-15;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let wp = w.get(r, p);
                    let wq = w.get(r, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || math::abs(gamma) <= tol * math::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + math::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + math::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                for r in 0..m {
                    let wp = w.get(r, p);
                    let wq = w.get(r, q);
                    w.set(r, p, c * wp - s * wq);
                    w.set(r, q, s * wp + c * wq);
                }
                for r in 0..n {
                    let vp = v.get(r, p);
                    let vq = v.get(r, q);
                    v.set(r, p, c * vp - s * vq);
                    v.set(r, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms; sort descending (stable).
    let mut sigma: Vec<f64> = (0..n)
        .map(|c| math::sqrt((0..m).map(|r| w.get(r, c) * w.get(r, c)).sum()))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite sigma"));

    // Singular values at or below the orthogonalization noise floor are
    // round-off, not data: zero them and rebuild their u-columns, since
    // normalizing a noise column would break orthonormality.
    let smax = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let cutoff = smax * (m.max(n) as f64) * f64::EPSILON * 8.0;

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut s_sorted = vec![0.0; n];
    let mut deficient = vec![false; n];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            v_sorted.set(r, dst, v.get(r, src));
        }
        if sigma[src] > cutoff && sigma[src] > 0.0 {
            s_sorted[dst] = sigma[src];
            for r in 0..m {
                u.set(r, dst, w.get(r, src) / sigma[src]);
            }
        } else {
            deficient[dst] = true;
        }
    }
    sigma = s_sorted;

    complete_deficient_columns(&mut u, &deficient);

    Svd { u, s: sigma, v: v_sorted }
}

/// Fill the (currently zero) u-columns of rank-deficient directions with a
/// deterministic orthonormal completion built from canonical basis vectors.
fn complete_deficient_columns(u: &mut Matrix, deficient: &[bool]) {
    let m = u.rows();
    let n = u.cols();
    let mut next_basis = 0usize;
    for c in 0..n {
        if !deficient[c] {
            continue;
        }
        // Try canonical vectors until one survives orthogonalization.
        'candidates: while next_basis < m {
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            // Two rounds of Gram-Schmidt against all other columns.
            for _ in 0..2 {
                for other in 0..n {
                    if other == c {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|r| cand[r] * u.get(r, other)).sum();
                    for (r, cv) in cand.iter_mut().enumerate() {
                        *cv -= dot * u.get(r, other);
                    }
                }
            }
            let norm = math::sqrt(cand.iter().map(|v| v * v).sum());
            if norm > 0.5 {
                for (r, cv) in cand.iter().enumerate() {
                    u.set(r, c, cv / norm);
                }
                break 'candidates;
            }
        }
    }
}

fn apply_sign_convention(svd: &mut Svd) {
    for c in 0..svd.u.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..svd.u.rows() {
            let a = math::abs(svd.u.get(r, c));
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if svd.u.get(best, c) < 0.0 {
            for r in 0..svd.u.rows() {
                svd.u.set(r, c, -svd.u.get(r, c));
            }
            for r in 0..svd.v.rows() {
                svd.v.set(r, c, -svd.v.get(r, c));
            }
        }
    }
}

/// Thin Householder QR of a matrix with rows >= cols: `a = q * r` with
/// `q` of shape rows x cols (orthonormal columns) and `r` upper-triangular.
fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);
    let mut r = a.clone();
    // Reflectors v_k stored densely; beta_k = 2 / (v^T v).
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = vec![0.0; m];
        let mut norm = 0.0;
        for i in k..m {
            let x = r.get(i, k);
            v[i] = x;
            norm += x * x;
        }
        norm = math::sqrt(norm);
        if norm == 0.0 {
            reflectors.push(vec![0.0; m]);
            continue;
        }
        let alpha = if v[k] >= 0.0 { -norm } else { norm };
        v[k] -= alpha;
        let vtv: f64 = v[k..].iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            reflectors.push(vec![0.0; m]);
            continue;
        }
        let beta = 2.0 / vtv;
        // Apply reflector to the remaining columns of r.
        for c in k..n {
            let dot: f64 = (k..m).map(|i| v[i] * r.get(i, c)).sum();
            let f = beta * dot;
            for i in k..m {
                r.set(i, c, r.get(i, c) - f * v[i]);
            }
        }
        reflectors.push(v);
    }
    // Thin q: apply reflectors in reverse to the first n canonical columns.
    let mut q = Matrix::zeros(m, n);
    for c in 0..n {
        q.set(c, c, 1.0);
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        let vtv: f64 = v[k..].iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        let beta = 2.0 / vtv;
        for c in 0..n {
            let dot: f64 = (k..m).map(|i| v[i] * q.get(i, c)).sum();
            let f = beta * dot;
            for i in k..m {
                q.set(i, c, q.get(i, c) - f * v[i]);
            }
        }
    }
    let mut r_sq = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            r_sq.set(i, j, r.get(i, j));
        }
    }
    (q, r_sq)
}

/// First `cols` columns of a random orthogonal matrix (`rows >= cols`),
/// drawn by QR-factoring a Gaussian sample from `rng`.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut crate::rng::SeededRng) -> Matrix {
    assert!(cols <= rows, "orthonormal frame needs cols <= rows");
    let g = rng.normal_matrix(rows, cols);
    let (q, _) = householder_qr(&g);
    q
}

// --- HOSVD -------------------------------------------------------------------

/// Tucker factorization of an order-3 tensor: `core x1 u1 x2 u2 x3 u3`.
#[derive(Debug, Clone)]
pub struct TuckerFactors3 {
    pub core: Tensor3,
    pub factors: [Matrix; 3],
}

impl TuckerFactors3 {
    pub fn ranks(&self) -> (usize, usize, usize) {
        self.core.dims()
    }

    pub fn reconstruct(&self) -> Tensor3 {
        let t = mode_product(&self.core, &self.factors[0], 1).expect("factor 1 shape");
        let t = mode_product(&t, &self.factors[1], 2).expect("factor 2 shape");
        mode_product(&t, &self.factors[2], 3).expect("factor 3 shape")
    }
}

/// Higher-order SVD at the given multilinear ranks: factor `j` holds the top
/// `r_j` left singular vectors of the mode-`j` unfolding, and the core is the
/// tensor projected onto those bases.
pub fn hosvd(t: &Tensor3, ranks: (usize, usize, usize)) -> Result<TuckerFactors3> {
    let dims = t.dims();
    let rank_arr = [ranks.0, ranks.1, ranks.2];
    let dim_arr = [dims.0, dims.1, dims.2];
    for j in 0..3 {
        if rank_arr[j] == 0 || rank_arr[j] > dim_arr[j] {
            return Err(Error::InvalidArgument(format!(
                "mode-{} rank {} out of range 1..={}",
                j + 1,
                rank_arr[j],
                dim_arr[j]
            )));
        }
    }
    let mut factors: Vec<Matrix> = Vec::with_capacity(3);
    for j in 1..=3 {
        let unf = matricize(t, j)?;
        let dec = svd(&unf)?;
        factors.push(dec.u.col_block(0, rank_arr[j - 1]));
    }
    let core = mode_product(&mode_product(&mode_product(t, &factors[0].transpose(), 1)?, &factors[1].transpose(), 2)?, &factors[2].transpose(), 3)?;
    let [u1, u2, u3]: [Matrix; 3] = factors.try_into().expect("three factors");
    Ok(TuckerFactors3 {
        core,
        factors: [u1, u2, u3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::outer3;

    #[test]
    fn svd_identity() {
        let dec = svd(&Matrix::identity(3)).unwrap();
        for s in &dec.s {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_diagonal() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, 3.0);
        m.set(1, 1, 1.0);
        let dec = svd(&m).unwrap();
        assert!((dec.s[0] - 3.0).abs() < 1e-14);
        assert!((dec.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstruction_and_orthonormality() {
        let mut rng = SeededRng::new(42);
        for &(r, c) in &[(5usize, 3usize), (3, 5), (7, 7), (4, 1)] {
            let m = rng.normal_matrix(r, c);
            let dec = svd(&m).unwrap();
            let rel = dec.reconstruct().rel_frobenius_diff(&m);
            assert!(rel < 1e-10, "reconstruction error {rel} for {r}x{c}");
            assert!(dec.u.gram_identity_deviation() < 1e-10);
            assert!(dec.v.gram_identity_deviation() < 1e-10);
            // Nonincreasing singular values.
            for w in dec.s.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = SeededRng::new(5);
        let m = rng.normal_matrix(6, 4);
        let dec = svd(&m).unwrap();
        for c in 0..dec.u.cols() {
            let col = dec.u.col(c);
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b.abs()));
            assert!(col.iter().any(|&v| (v.abs() - mx).abs() < 1e-15 && v >= 0.0));
        }
    }

    #[test]
    fn svd_deterministic_bit_identical() {
        let mut rng = SeededRng::new(17);
        let m = rng.normal_matrix(6, 5);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.s, b.s);
        assert_eq!(a.v.data(), b.v.data());
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(matches!(svd(&m), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn svd_zero_matrix_has_orthonormal_factors() {
        let dec = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(dec.s.iter().all(|&s| s == 0.0));
        assert!(dec.u.gram_identity_deviation() < 1e-12);
        assert!(dec.v.gram_identity_deviation() < 1e-12);
    }

    #[test]
    fn svd_tall_uses_qr_path() {
        let mut rng = SeededRng::new(23);
        let m = rng.normal_matrix(21, 4);
        let dec = svd(&m).unwrap();
        assert!(dec.reconstruct().rel_frobenius_diff(&m) < 1e-10);
        assert!(dec.u.gram_identity_deviation() < 1e-10);
    }

    // Strongly graded spectrum: one-sided Jacobi keeps small singular values
    // relatively accurate instead of drowning them in the large ones.
    #[test]
    fn svd_graded_spectrum_is_relatively_accurate() {
        let mut rng = SeededRng::new(29);
        let n = 8;
        let u = random_orthonormal(n, n, &mut rng);
        let v = random_orthonormal(n, n, &mut rng);
        let sigmas: Vec<f64> = (0..n).map(|i| libm::pow(10.0, -(1.5 * i as f64))).collect();
        let mut scaled = u.clone();
        for r in 0..n {
            for (c, s) in sigmas.iter().enumerate() {
                scaled.set(r, c, scaled.get(r, c) * s);
            }
        }
        let m = scaled.matmul_transposed(&v);
        let dec = svd(&m).unwrap();
        for (got, want) in dec.s.iter().zip(&sigmas) {
            // Relative accuracy down to an absolute round-off floor set by
            // the largest singular value.
            assert!(
                (got - want).abs() <= 1e-8 * want + 1e-14,
                "sigma {got} vs {want}"
            );
        }
        assert!(dec.reconstruct().rel_frobenius_diff(&m) < 1e-12);
    }

    #[test]
    fn svd_moderate_size_random() {
        let mut rng = SeededRng::new(37);
        let m = rng.normal_matrix(120, 80);
        let dec = svd(&m).unwrap();
        assert!(dec.reconstruct().rel_frobenius_diff(&m) < 1e-11);
        assert!(dec.u.gram_identity_deviation() < 1e-10);
        assert!(dec.v.gram_identity_deviation() < 1e-10);
    }

    #[test]
    fn truncated_rank_one_exact() {
        let mut rng = SeededRng::new(9);
        let a = rng.normal_matrix(5, 1);
        let b = rng.normal_matrix(4, 1);
        let m = a.matmul_transposed(&b);
        let dec = truncated_svd(&m, 1).unwrap();
        assert!(dec.reconstruct().rel_frobenius_diff(&m) < 1e-12);
    }

    #[test]
    fn truncated_diag_tail_error() {
        let mut m = Matrix::zeros(3, 3);
        m.set(0, 0, 3.0);
        m.set(1, 1, 2.0);
        m.set(2, 2, 1.0);
        let dec = truncated_svd(&m, 2).unwrap();
        let err = dec.reconstruct().sub(&m).frobenius_norm();
        assert!((err - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_matches_tail_energy() {
        let mut rng = SeededRng::new(31);
        let m = rng.normal_matrix(8, 8);
        let full = svd(&m).unwrap();
        let dec = truncated_svd(&m, 4).unwrap();
        let err = dec.reconstruct().sub(&m).frobenius_norm();
        assert!((err - full.tail_energy(4)).abs() < 1e-8);
    }

    #[test]
    fn truncated_rank_out_of_range() {
        let m = Matrix::zeros(3, 3);
        assert!(truncated_svd(&m, 0).is_err());
        assert!(truncated_svd(&m, 4).is_err());
    }

    #[test]
    fn rank_zero_matrix() {
        assert_eq!(numerical_rank(&Matrix::zeros(3, 4), 1e-8).unwrap(), 0);
    }

    #[test]
    fn rank_identity() {
        assert_eq!(numerical_rank(&Matrix::identity(4), 1e-8).unwrap(), 4);
    }

    #[test]
    fn rank_outer_product() {
        let mut rng = SeededRng::new(3);
        let a = rng.normal_matrix(6, 1);
        let b = rng.normal_matrix(5, 1);
        let m = a.matmul_transposed(&b);
        assert_eq!(numerical_rank(&m, 1e-8).unwrap(), 1);
    }

    #[test]
    fn rank_requires_positive_tol() {
        assert!(numerical_rank(&Matrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn hosvd_full_ranks_lossless() {
        let mut rng = SeededRng::new(77);
        let t = rng.normal_tensor((3, 4, 5));
        let f = hosvd(&t, (3, 4, 5)).unwrap();
        assert!(f.reconstruct().rel_frobenius_diff(&t) < 1e-10);
        for u in &f.factors {
            assert!(u.gram_identity_deviation() < 1e-10);
        }
    }

    #[test]
    fn hosvd_rank_one_tensor_exact() {
        let t = outer3(&[1.0, 2.0], &[0.5, -1.0, 2.0], &[3.0, 1.0, -0.5, 0.25]);
        let f = hosvd(&t, (1, 1, 1)).unwrap();
        assert!(f.reconstruct().rel_frobenius_diff(&t) < 1e-12);
    }

    #[test]
    fn hosvd_error_monotone_in_rank() {
        let mut rng = SeededRng::new(13);
        let t = rng.normal_tensor((4, 6, 6));
        let lo = hosvd(&t, (2, 3, 3)).unwrap().reconstruct().sub(&t).frobenius_norm();
        let hi = hosvd(&t, (4, 6, 6)).unwrap().reconstruct().sub(&t).frobenius_norm();
        assert!(hi <= lo + 1e-12);
    }

    #[test]
    fn hosvd_rejects_bad_ranks() {
        let t = Tensor3::zeros((2, 3, 4));
        assert!(hosvd(&t, (3, 3, 4)).is_err());
        assert!(hosvd(&t, (2, 0, 4)).is_err());
    }
}

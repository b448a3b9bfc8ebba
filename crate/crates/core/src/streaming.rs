//! Chunked attention evaluation with online softmax normalization: a single
//! sweep over key/value chunks per query, keeping a running row maximum and
//! normalizer and rescaling the accumulator whenever the maximum moves. The
//! full score matrix is never materialized. One shared key/value stream
//! serves all query heads per call.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Matrix, Tensor3};

/// Streaming softmax attention over shared keys/values.
///
/// `q_heads` is `(heads, n, r)`, `k` is `(n, r)`, `v` is `(n, r_v)`;
/// `scale` multiplies the raw scores (pass `1/sqrt(d)` for scaled attention).
/// Keys are visited in chunks of `chunk` rows. Returns `(heads, n, r_v)`.
pub fn streaming_attention(
    q_heads: &Tensor3,
    k: &Matrix,
    v: &Matrix,
    chunk: usize,
    scale: f64,
    causal: bool,
) -> Result<Tensor3> {
    if chunk < 1 {
        return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
    }
    let (n_heads, n_q, r) = q_heads.dims();
    let n_kv = k.rows();
    if k.cols() != r {
        return Err(Error::ShapeMismatch(format!(
            "key width {} does not match query width {r}",
            k.cols()
        )));
    }
    if v.rows() != n_kv {
        return Err(Error::ShapeMismatch(format!(
            "value rows {} do not match key rows {n_kv}",
            v.rows()
        )));
    }
    if causal && n_q != n_kv {
        return Err(Error::ShapeMismatch(format!(
            "causal masking needs square attention, got {n_q} queries over {n_kv} keys"
        )));
    }
    let r_v = v.cols();
    let mut out = Tensor3::zeros((n_heads, n_q, r_v));

    let mut q_row = vec![0.0; r];
    let mut acc = vec![0.0; r_v];
    for i in 0..n_heads {
        for m in 0..n_q {
            for (t, q) in q_row.iter_mut().enumerate() {
                *q = q_heads.get(i, m, t);
            }
            let mut running_max = f64::NEG_INFINITY;
            let mut normalizer = 0.0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut start = 0;
            while start < n_kv {
                let stop = (start + chunk).min(n_kv);
                for key_idx in start..stop {
                    if causal && key_idx > m {
                        break;
                    }
                    let mut s = 0.0;
                    for (qv, kv) in q_row.iter().zip(k.row(key_idx)) {
                        s += qv * kv;
                    }
                    s *= scale;
                    if s > running_max {
                        // Rescale history to the new maximum.
                        let shrink = if running_max == f64::NEG_INFINITY {
                            0.0
                        } else {
                            math::exp(running_max - s)
                        };
                        normalizer *= shrink;
                        acc.iter_mut().for_each(|a| *a *= shrink);
                        running_max = s;
                    }
                    let w = math::exp(s - running_max);
                    normalizer += w;
                    for (a, vv) in acc.iter_mut().zip(v.row(key_idx)) {
                        *a += w * vv;
                    }
                }
                start = stop;
            }
            debug_assert!(normalizer > 0.0);
            for (t, a) in acc.iter().enumerate() {
                out.set(i, m, t, a / normalizer);
            }
        }
    }
    Ok(out)
}

/// Analytic chunk-load accounting for the streaming schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSchedule {
    /// Passes over the query dimension (one per query chunk).
    pub query_sweeps: u64,
    /// Distinct KV chunk loads within one sweep, across all KV streams.
    pub kv_loads_per_sweep: u64,
    /// KV chunk loads over the whole evaluation.
    pub total_kv_loads: u64,
}

/// KV-chunk load counts when `n_kv_effective` distinct key/value streams
/// serve `n_heads` query heads. A fully factorized or single-group layer has
/// one effective stream; an unshared layer has one per head.
pub fn chunk_schedule(
    n_heads: u64,
    n_kv_effective: u64,
    n_tokens: u64,
    chunk: u64,
) -> Result<ChunkSchedule> {
    if n_heads == 0 || n_kv_effective == 0 || n_tokens == 0 || chunk == 0 {
        return Err(Error::InvalidArgument(
            "chunk schedule requires positive head, stream, token, and chunk counts".into(),
        ));
    }
    if n_kv_effective > n_heads {
        return Err(Error::InvalidArgument(format!(
            "effective KV streams {n_kv_effective} exceed head count {n_heads}"
        )));
    }
    let chunks = n_tokens.div_ceil(chunk);
    Ok(ChunkSchedule {
        query_sweeps: chunks,
        kv_loads_per_sweep: n_kv_effective * chunks,
        total_kv_loads: n_kv_effective * chunks * chunks,
    })
}

/// Total KV chunk loads of the schedule (see [`chunk_schedule`]).
pub fn chunk_load_count(
    n_heads: u64,
    n_kv_effective: u64,
    n_tokens: u64,
    chunk: u64,
) -> Result<u64> {
    Ok(chunk_schedule(n_heads, n_kv_effective, n_tokens, chunk)?.total_kv_loads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::softmax_rows;
    use crate::rng::SeededRng;

    /// Naive oracle: materialize the score matrix, softmax, contract.
    fn naive(
        q_heads: &Tensor3,
        k: &Matrix,
        v: &Matrix,
        scale: f64,
        causal: bool,
    ) -> Tensor3 {
        let (n_heads, n_q, _) = q_heads.dims();
        let mut out = Tensor3::zeros((n_heads, n_q, v.cols()));
        for i in 0..n_heads {
            let scores = q_heads.slice1(i).matmul_transposed(k).scale(scale);
            let attn = softmax_rows(&scores, causal);
            out.set_slice1(i, &attn.matmul(v));
        }
        out
    }

    fn random_case(seed: u64, n: usize) -> (Tensor3, Matrix, Matrix) {
        let mut rng = SeededRng::new(seed);
        (
            rng.normal_tensor((3, n, 6)),
            rng.normal_matrix(n, 6),
            rng.normal_matrix(n, 5),
        )
    }

    #[test]
    fn one_pass_chunk_matches_naive() {
        let (q, k, v) = random_case(1, 9);
        let want = naive(&q, &k, &v, 0.5, false);
        let got = streaming_attention(&q, &k, &v, 9, 0.5, false).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn unit_chunk_matches_naive() {
        let (q, k, v) = random_case(2, 8);
        for &causal in &[false, true] {
            let want = naive(&q, &k, &v, 0.5, causal);
            let got = streaming_attention(&q, &k, &v, 1, 0.5, causal).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn all_chunk_sizes_match_naive() {
        let n = 13;
        let (q, k, v) = random_case(3, n);
        for &causal in &[false, true] {
            let want = naive(&q, &k, &v, 0.37, causal);
            for chunk in [1, 2, 7, n - 1, n, n + 3] {
                let got = streaming_attention(&q, &k, &v, chunk, 0.37, causal).unwrap();
                assert!(
                    got.max_abs_diff(&want) < 1e-12,
                    "chunk {chunk} causal {causal}"
                );
            }
        }
    }

    // Causal outputs for a prefix must not depend on later tokens.
    #[test]
    fn causal_rows_independent_of_suffix() {
        let (q, k, v) = random_case(4, 10);
        let full = streaming_attention(&q, &k, &v, 3, 0.5, true).unwrap();
        let t = 6;
        let mut rng = SeededRng::new(99);
        let q_prefix = {
            let mut qp = Tensor3::zeros((3, t, 6));
            for i in 0..3 {
                qp.set_slice1(i, &q.slice1(i).row_block(0, t));
            }
            qp
        };
        // Replace the suffix of k/v with fresh noise; prefix rows must agree.
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for row in t..10 {
            for c in 0..6 {
                k2.set(row, c, rng.normal());
            }
            for c in 0..5 {
                v2.set(row, c, rng.normal());
            }
        }
        let prefix = streaming_attention(&q_prefix, &k2.row_block(0, t), &v2.row_block(0, t), 3, 0.5, true)
            .unwrap();
        for i in 0..3 {
            for m in 0..t {
                for c in 0..5 {
                    assert!((full.get(i, m, c) - prefix.get(i, m, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn large_scores_stay_finite_and_exact() {
        let mut rng = SeededRng::new(5);
        let q = rng.normal_tensor((2, 6, 4)).scale(40.0);
        let k = rng.normal_matrix(6, 4).scale(40.0);
        let v = rng.normal_matrix(6, 3);
        // Raw scores reach magnitudes around 1e3.
        let want = naive(&q, &k, &v, 1.0, false);
        let got = streaming_attention(&q, &k, &v, 2, 1.0, false).unwrap();
        assert!(got.is_finite());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn rejects_zero_chunk_and_bad_shapes() {
        let (q, k, v) = random_case(6, 4);
        assert!(streaming_attention(&q, &k, &v, 0, 1.0, false).is_err());
        let bad_k = Matrix::zeros(4, 7);
        assert!(streaming_attention(&q, &bad_k, &v, 2, 1.0, false).is_err());
    }

    // Enumerate the schedule loops and count loads directly.
    fn enumerate_loads(n_kv_effective: u64, n_tokens: u64, chunk: u64) -> u64 {
        let chunks = n_tokens.div_ceil(chunk);
        let mut loads = 0;
        for _query_chunk in 0..chunks {
            for _kv_chunk in 0..chunks {
                loads += n_kv_effective; // one load per distinct KV stream
            }
        }
        loads
    }

    #[test]
    fn schedule_matches_enumeration() {
        for &(eff, n, chunk) in &[(1u64, 16u64, 4u64), (2, 16, 4), (4, 17, 5), (1, 7, 7), (3, 9, 2)] {
            let sched = chunk_schedule(4, eff, n, chunk).unwrap();
            assert_eq!(sched.total_kv_loads, enumerate_loads(eff, n, chunk));
            assert_eq!(sched.kv_loads_per_sweep, eff * n.div_ceil(chunk));
        }
    }

    #[test]
    fn single_stream_sweep_loads() {
        // One effective stream: ceil(n/chunk) loads per query-chunk sweep.
        let sched = chunk_schedule(8, 1, 32, 4).unwrap();
        assert_eq!(sched.kv_loads_per_sweep, 8);
        // Per-head streams cost exactly n_heads times more.
        let mha = chunk_schedule(8, 8, 32, 4).unwrap();
        assert_eq!(mha.total_kv_loads, 8 * sched.total_kv_loads);
        // Single whole-sequence chunk: one load per sweep.
        let whole = chunk_schedule(8, 1, 32, 32).unwrap();
        assert_eq!(whole.kv_loads_per_sweep, 1);
        assert_eq!(whole.total_kv_loads, 1);
    }

    #[test]
    fn schedule_rejects_degenerate_inputs() {
        assert!(chunk_schedule(0, 1, 8, 2).is_err());
        assert!(chunk_schedule(4, 0, 8, 2).is_err());
        assert!(chunk_schedule(4, 1, 8, 0).is_err());
        assert!(chunk_schedule(4, 8, 8, 2).is_err());
    }
}

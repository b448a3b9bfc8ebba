//! Randomized verification suites behind `tuckattn verify`: each check runs
//! one oracle comparison and reports its worst error against a fixed
//! tolerance. All randomness is derived from the caller's seed, so repeated
//! invocations are identical.

use tuckattn_core::attention::{
    mha_forward, relative_deviation, softmax_rows, stack_attention_tensors, tensor_mha_forward,
    MhaWeights, SequenceInput,
};
use tuckattn_core::convert::mha_to_tucker;
use tuckattn_core::grad::{param_buffers_mut, tucker_backward};
use tuckattn_core::linalg::{numerical_rank, DEFAULT_RANK_TOL};
use tuckattn_core::rng::SeededRng;
use tuckattn_core::rope::{latent_rope_scores, rope_matrix, RopeConfig};
use tuckattn_core::streaming::streaming_attention;
use tuckattn_core::tensor::{matricize, Matrix, Tensor3};
use tuckattn_core::tucker::{decode_step, materialize, tucker_forward, KvCache, TuckerAttentionParams};
use tuckattn_core::variants::{
    canonical_core, gqa_lift, mla_forward_fused, mla_forward_unfused, mla_fuse,
    mla_lift, MlaRopeMode, MlaWeights,
};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= self.tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Equivalence,
    Ranks,
    Rope,
    Decode,
    Streaming,
    Grad,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Equivalence,
        Suite::Ranks,
        Suite::Rope,
        Suite::Decode,
        Suite::Streaming,
        Suite::Grad,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Ranks => "ranks",
            Suite::Rope => "rope",
            Suite::Decode => "decode",
            Suite::Streaming => "streaming",
            Suite::Grad => "grad",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.iter().copied().find(|v| v.name() == s)
    }

    pub fn run(&self, seed: u64) -> Vec<Check> {
        match self {
            Suite::Equivalence => equivalence_suite(seed),
            Suite::Ranks => ranks_suite(seed),
            Suite::Rope => rope_suite(seed),
            Suite::Decode => decode_suite(seed),
            Suite::Streaming => streaming_suite(seed),
            Suite::Grad => grad_suite(seed),
        }
    }
}

fn check(name: impl Into<String>, max_err: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        max_err,
        tol,
    }
}

/// Per-head attention vs the stacked tensor contraction, and the factorized
/// forward vs its materialized oracle.
pub fn equivalence_suite(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    let mut checks = Vec::new();

    let mut worst_dense = 0.0f64;
    for &(h, d, n) in &[(1usize, 8usize, 1usize), (2, 8, 5), (4, 32, 16), (2, 32, 5)] {
        for &causal in &[false, true] {
            let w = MhaWeights::random(h, d, &mut rng).unwrap();
            let x = rng.normal_matrix(n, d);
            let input = SequenceInput::new(x, causal).unwrap();
            let a = mha_forward(&w, &input).unwrap();
            let b = tensor_mha_forward(&stack_attention_tensors(&w), &input, w.d_head()).unwrap();
            worst_dense = worst_dense.max(relative_deviation(&b, &a));
        }
    }
    checks.push(check("per-head vs stacked-tensor attention", worst_dense, 1e-10));

    let mut worst_factored = 0.0f64;
    for &shared in &[false, true] {
        for &causal in &[false, true] {
            let p = TuckerAttentionParams::random_init(
                4,
                32,
                (2, 8, 8),
                (2, 8, 8),
                shared,
                8.0,
                &mut rng,
            )
            .unwrap();
            let x = rng.normal_matrix(12, 32);
            let input = SequenceInput::new(x, causal).unwrap();
            let a = tucker_forward(&p, &input, None).unwrap();
            let b = tensor_mha_forward(&materialize(&p), &input, 8).unwrap();
            worst_factored = worst_factored.max(relative_deviation(&a, &b));
        }
    }
    checks.push(check("factorized vs materialized forward", worst_factored, 1e-10));

    let mut worst_lossless = 0.0f64;
    let w = MhaWeights::random(4, 16, &mut rng).unwrap();
    let p = mha_to_tucker(&w, (4, 16, 16), (4, 16, 16), false).unwrap();
    let x = rng.normal_matrix(9, 16);
    for &causal in &[false, true] {
        let input = SequenceInput::new(x.clone(), causal).unwrap();
        let a = tucker_forward(&p, &input, None).unwrap();
        let b = mha_forward(&w, &input).unwrap();
        worst_lossless = worst_lossless.max(relative_deviation(&a, &b));
    }
    checks.push(check("full-rank conversion reproduces dense layer", worst_lossless, 1e-10));

    checks
}

/// Numerical mode ranks of lifted variants against their closed-form values,
/// plus the selector-core factorization identity.
pub fn ranks_suite(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    let (n_heads, d, d_head) = (4usize, 16usize, 4usize);
    let rank = |t: &Tensor3, mode: usize| {
        numerical_rank(&matricize(t, mode).unwrap(), DEFAULT_RANK_TOL).unwrap()
    };
    let mut worst_rank_err = 0.0f64;
    for _trial in 0..10 {
        // Dense layer: (n_heads, d, d) on both tensors.
        let mha = MhaWeights::random(n_heads, d, &mut rng).unwrap();
        let pair = stack_attention_tensors(&mha);
        let expect = [
            (rank(&pair.w_pre, 1), n_heads),
            (rank(&pair.w_pre, 2), d),
            (rank(&pair.w_pre, 3), d),
            (rank(&pair.w_post, 1), n_heads),
            (rank(&pair.w_post, 2), d),
            (rank(&pair.w_post, 3), d),
        ];
        // Single KV group: key/value mode collapses to d_head.
        let mqa = tuckattn_core::variants::GqaWeights::random(n_heads, 1, d, &mut rng).unwrap();
        let mqa_pair = gqa_lift(&mqa);
        let expect_mqa = [
            (rank(&mqa_pair.w_pre, 1), n_heads),
            (rank(&mqa_pair.w_pre, 2), d),
            (rank(&mqa_pair.w_pre, 3), d_head),
            (rank(&mqa_pair.w_post, 3), d_head),
        ];
        // Two KV groups.
        let gqa = tuckattn_core::variants::GqaWeights::random(n_heads, 2, d, &mut rng).unwrap();
        let gqa_pair = gqa_lift(&gqa);
        let expect_gqa = [
            (rank(&gqa_pair.w_pre, 3), 2 * d_head),
            (rank(&gqa_pair.w_post, 3), 2 * d_head),
        ];
        // Latent attention: query/key modes capped by the latent widths.
        let mla = MlaWeights::random(n_heads, d, 6, 4, true, &mut rng).unwrap();
        let mla_pair = mla_lift(&mla);
        let expect_mla = [
            (rank(&mla_pair.w_pre, 1), n_heads),
            (rank(&mla_pair.w_pre, 2), 6),
            (rank(&mla_pair.w_pre, 3), 4),
            (rank(&mla_pair.w_post, 2), d),
            (rank(&mla_pair.w_post, 3), 4),
        ];
        for (got, want) in expect
            .iter()
            .chain(&expect_mqa)
            .chain(&expect_gqa)
            .chain(&expect_mla)
        {
            worst_rank_err = worst_rank_err.max((*got as f64 - *want as f64).abs());
        }
    }
    let mut checks = vec![check("lifted variant mode ranks", worst_rank_err, 0.0)];

    let mha = MhaWeights::random(n_heads, d, &mut rng).unwrap();
    let pair = stack_attention_tensors(&mha);
    let core = canonical_core(n_heads, d, d_head).unwrap();
    let rebuilt = tuckattn_core::tensor::mode_product(
        &tuckattn_core::tensor::mode_product(&core, &mha.wq, 2).unwrap(),
        &mha.wk,
        3,
    )
    .unwrap();
    checks.push(check(
        "selector-core factorization of the stacked tensor",
        rebuilt.max_abs_diff(&pair.w_pre),
        1e-12,
    ));
    checks
}

/// Rotation group property and latent-score shift invariance.
pub fn rope_suite(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    let cfg = RopeConfig::with_default_base(8).unwrap();

    let mut worst_group = 0.0f64;
    for &(m, n) in &[(3i64, 1i64), (25, 10), (0, 40), (17, 17), (64, 3)] {
        let lhs = rope_matrix(&cfg, m).matmul_transposed(&rope_matrix(&cfg, n));
        worst_group = worst_group.max(lhs.max_abs_diff(&rope_matrix(&cfg, m - n)));
    }
    let mut checks = vec![check("rotation composition R(m) R(n)^T = R(m-n)", worst_group, 1e-12)];

    let q_hat = rng.normal_tensor((3, 7, 8));
    let k = rng.normal_matrix(7, 8);
    let base: Vec<i64> = (0..7).collect();
    let s0 = latent_rope_scores(&q_hat, &k, &cfg, &base).unwrap();
    let mut worst_shift = 0.0f64;
    for &s in &[1i64, 3, 17] {
        let pos: Vec<i64> = base.iter().map(|p| p + s).collect();
        let shifted = latent_rope_scores(&q_hat, &k, &cfg, &pos).unwrap();
        worst_shift = worst_shift.max(shifted.max_abs_diff(&s0));
    }
    checks.push(check("latent score shift invariance", worst_shift, 1e-12));

    // Fused vs unfused latent-attention forward under latent rotation.
    let mut worst_fused = 0.0f64;
    for &shared in &[true, false] {
        let w = MlaWeights::random(4, 16, 6, 4, shared, &mut rng).unwrap();
        let fused = mla_fuse(&w);
        let rope = RopeConfig::with_default_base(4).unwrap();
        let x = rng.normal_matrix(7, 16);
        for &causal in &[false, true] {
            let input = SequenceInput::new(x.clone(), causal).unwrap();
            let a = mla_forward_unfused(&w, &input, MlaRopeMode::Latent(&rope)).unwrap();
            let b = mla_forward_fused(&w, &fused, &input, Some(&rope)).unwrap();
            worst_fused = worst_fused.max(relative_deviation(&b, &a));
        }
    }
    checks.push(check("fused vs unfused latent-rotation forward", worst_fused, 1e-10));
    checks
}

/// Incremental decoding against the causal full forward.
pub fn decode_suite(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    let mut checks = Vec::new();
    let n = 32;
    for &shared in &[false, true] {
        for rope_dim in [None, Some(4usize)] {
            let p = TuckerAttentionParams::random_init(
                2,
                8,
                (2, 4, 4),
                (2, 4, 4),
                shared,
                4.0,
                &mut rng,
            )
            .unwrap();
            let cfg = rope_dim.map(|d| RopeConfig::with_default_base(d).unwrap());
            let x = rng.normal_matrix(n, 8);
            let input = SequenceInput::new(x.clone(), true).unwrap();
            let full = tucker_forward(&p, &input, cfg.as_ref()).unwrap();
            let mut cache = KvCache::new(&p);
            let mut worst = 0.0f64;
            for t in 0..n {
                let row = decode_step(&p, &mut cache, x.row(t), t, cfg.as_ref()).unwrap();
                for (a, b) in row.iter().zip(full.row(t)) {
                    worst = worst.max((a - b).abs());
                }
            }
            let label = format!(
                "decode vs full forward ({}, {})",
                if shared { "shared kv" } else { "separated kv" },
                if rope_dim.is_some() { "latent rotation" } else { "no rotation" },
            );
            checks.push(check(label, worst, 1e-10));
        }
    }
    checks
}

/// Streaming online-softmax evaluation against the naive path.
pub fn streaming_suite(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    let n = 13;
    let q = rng.normal_tensor((3, n, 6));
    let k = rng.normal_matrix(n, 6);
    let v = rng.normal_matrix(n, 5);
    let naive = |causal: bool| {
        let mut out = Tensor3::zeros((3, n, 5));
        for i in 0..3 {
            let attn = softmax_rows(&q.slice1(i).matmul_transposed(&k).scale(0.5), causal);
            out.set_slice1(i, &attn.matmul(&v));
        }
        out
    };
    let mut checks = Vec::new();
    for &causal in &[false, true] {
        let want = naive(causal);
        let mut worst = 0.0f64;
        for chunk in [1, 2, 7, n - 1, n, n + 3] {
            let got = streaming_attention(&q, &k, &v, chunk, 0.5, causal).unwrap();
            worst = worst.max(got.max_abs_diff(&want));
        }
        checks.push(check(
            format!("streaming vs naive ({})", if causal { "causal" } else { "bidirectional" }),
            worst,
            1e-12,
        ));
    }
    checks
}

/// Analytic gradients against central finite differences.
pub fn grad_suite(seed: u64) -> Vec<Check> {
    let mut worst = 0.0f64;
    for offset in 0..3 {
        let mut rng = SeededRng::new(seed + offset);
        let shared = offset % 2 == 1;
        let params =
            TuckerAttentionParams::random_init(2, 8, (2, 4, 4), (2, 4, 4), shared, 4.0, &mut rng)
                .unwrap();
        let x = rng.normal_matrix(5, 8);
        let upstream = rng.normal_matrix(5, 8);
        let input = SequenceInput::new(x, true).unwrap();
        worst = worst.max(finite_difference_error(&params, &input, &upstream));
    }
    vec![check("analytic gradients vs finite differences", worst, 1e-4)]
}

/// Central-difference oracle over every parameter component and the input.
pub fn finite_difference_error(
    params: &TuckerAttentionParams,
    input: &SequenceInput,
    upstream: &Matrix,
) -> f64 {
    let loss = |p: &TuckerAttentionParams, x: &Matrix| -> f64 {
        let inp = SequenceInput::new(x.clone(), input.causal).unwrap();
        let out = tucker_forward(p, &inp, None).unwrap();
        out.data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let grads = tucker_backward(params, input, upstream).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, fd: f64| {
        let mag = analytic.abs().max(fd.abs());
        if mag >= 1e-7 {
            worst = worst.max((analytic - fd).abs() / mag);
        }
    };
    let n_buffers = grads.buffers().len();
    for b in 0..n_buffers {
        for idx in 0..grads.buffers()[b].len() {
            let mut plus = params.clone();
            param_buffers_mut(&mut plus)[b][idx] += h;
            let mut minus = params.clone();
            param_buffers_mut(&mut minus)[b][idx] -= h;
            let fd = (loss(&plus, &input.x) - loss(&minus, &input.x)) / (2.0 * h);
            compare(grads.buffers()[b][idx], fd);
        }
    }
    for idx in 0..input.x.data().len() {
        let mut plus = input.x.clone();
        plus.data_mut()[idx] += h;
        let mut minus = input.x.clone();
        minus.data_mut()[idx] -= h;
        let fd = (loss(params, &plus) - loss(params, &minus)) / (2.0 * h);
        compare(grads.x.data()[idx], fd);
    }
    worst
}

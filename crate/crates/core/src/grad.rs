//! Analytic gradients of the factorized attention forward pass, an Adam
//! optimizer over its parameter buffers, and a toy trainer that fits a
//! single layer to a copy-previous-token regression task.
//!
//! The backward pass differentiates `<upstream, forward(params, x)>` by the
//! chain rule, applying the softmax Jacobian row by row. It covers the
//! masked and unmasked forward without rotary embeddings; in shared-KV mode
//! the key-factor gradient accumulates both the key and the value path.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{softmax_rows, SequenceInput};
use crate::convert::mha_to_tucker;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::SeededRng;
use crate::tensor::{fold, matricize, mode_product, Matrix, Tensor3};
use crate::tucker::TuckerAttentionParams;

/// Gradients for every learnable buffer plus the input sequence. Field
/// shapes mirror [`TuckerAttentionParams`]; `ut3` is `None` in shared mode,
/// where its contribution lands in `u3`.
#[derive(Debug, Clone)]
pub struct TuckerGrads {
    pub core_pre: Tensor3,
    pub core_post: Tensor3,
    pub u1: Matrix,
    pub u2: Matrix,
    pub u3: Matrix,
    pub ut1: Matrix,
    pub ut2: Matrix,
    pub ut3: Option<Matrix>,
    pub x: Matrix,
}

impl TuckerGrads {
    /// Largest absolute gradient entry across all buffers.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for buf in self.buffers() {
            for v in buf {
                m = m.max(math::abs(*v));
            }
        }
        m
    }

    /// All gradient buffers in a fixed order (input gradient excluded).
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.core_pre.data(),
            self.core_post.data(),
            self.u1.data(),
            self.u2.data(),
            self.u3.data(),
            self.ut1.data(),
            self.ut2.data(),
        ];
        if let Some(g) = &self.ut3 {
            v.push(g.data());
        }
        v
    }
}

/// Parameter buffers of a parameter set, in the same fixed order as
/// [`TuckerGrads::buffers`].
pub fn param_buffers_mut(p: &mut TuckerAttentionParams) -> Vec<&mut [f64]> {
    let mut v = vec![
        p.core_pre.data_mut(),
        p.core_post.data_mut(),
        p.u1.data_mut(),
        p.u2.data_mut(),
        p.u3.data_mut(),
        p.ut1.data_mut(),
        p.ut2.data_mut(),
    ];
    if let Some(m) = &mut p.ut3 {
        v.push(m.data_mut());
    }
    v
}

/// Exact gradients of `<upstream, forward>` with respect to all cores,
/// factors, and the input.
pub fn tucker_backward(
    params: &TuckerAttentionParams,
    input: &SequenceInput,
    upstream: &Matrix,
) -> Result<TuckerGrads> {
    let d = params.d_model();
    let n = input.n_tokens();
    if input.x.cols() != d {
        return Err(Error::ShapeMismatch(
            "input width does not match d_model".into(),
        ));
    }
    if (upstream.rows(), upstream.cols()) != (n, d) {
        return Err(Error::ShapeMismatch(
            "upstream gradient must match the output shape".into(),
        ));
    }
    let n_heads = params.n_heads();
    let (_, _, r3) = params.ranks_pre();
    let (_, _, rt3) = params.ranks_post();
    let inv_scale = 1.0 / math::sqrt(params.scale_dim);

    // Forward intermediates.
    let a_proj = input.x.matmul(&params.u2); // n x r2
    let head_core = mode_product(&params.core_pre, &params.u1, 1)?; // (heads, r2, r3)
    let q_hat = mode_product(&head_core, &a_proj, 2)?; // (heads, n, r3)
    let keys = params.latent_keys(&input.x); // n x r3
    let values = params.latent_values(&input.x); // n x rt3

    let mut probs = Tensor3::zeros((n_heads, n, n));
    let mut weighted = Tensor3::zeros((n_heads, n, rt3));
    for i in 0..n_heads {
        let scores = q_hat.slice1(i).matmul_transposed(&keys).scale(inv_scale);
        let attn = softmax_rows(&scores, input.causal);
        weighted.set_slice1(i, &attn.matmul(&values));
        probs.set_slice1(i, &attn);
    }
    let head_proj = mode_product(&weighted, &params.ut1.transpose(), 1)?; // (rt1, n, rt3)
    let core_post_flat = matricize(&params.core_post, 2)?; // rt2 x (rt1 rt3)
    let head_proj_flat = matricize(&head_proj, 2)?; // n x (rt1 rt3)
    let combined = core_post_flat.matmul_transposed(&head_proj_flat); // rt2 x n

    // Output side of the chain.
    let d_combined = params.ut2.transpose().matmul(&upstream.transpose()); // rt2 x n
    let d_ut2 = upstream.transpose().matmul_transposed(&combined); // d x rt2

    // Post core and its projection.
    let d_core_post = fold(
        &d_combined.matmul(&head_proj_flat),
        2,
        params.core_post.dims(),
    )?;
    let d_head_proj = fold(
        &d_combined.transpose().matmul(&core_post_flat),
        2,
        head_proj.dims(),
    )?;
    let d_ut1 = matricize(&weighted, 1)?.matmul_transposed(&matricize(&d_head_proj, 1)?);
    let d_weighted = mode_product(&d_head_proj, &params.ut1, 1)?; // (heads, n, rt3)

    // Through the softmax into scores, keys, values, queries.
    let mut d_values = Matrix::zeros(n, rt3);
    let mut d_keys = Matrix::zeros(n, r3);
    let mut d_q_hat = Tensor3::zeros(q_hat.dims());
    for i in 0..n_heads {
        let attn = probs.slice1(i);
        let dw = d_weighted.slice1(i); // n x rt3
        d_values = d_values.add(&attn.transpose().matmul(&dw));
        let d_attn = dw.matmul_transposed(&values); // n x n
        // Softmax Jacobian per row: p .* (g - <g, p>).
        let mut d_scores = Matrix::zeros(n, n);
        for m in 0..n {
            let mut dot = 0.0;
            for t in 0..n {
                dot += d_attn.get(m, t) * attn.get(m, t);
            }
            for t in 0..n {
                let p = attn.get(m, t);
                d_scores.set(m, t, p * (d_attn.get(m, t) - dot) * inv_scale);
            }
        }
        d_q_hat.set_slice1(i, &d_scores.matmul(&keys));
        d_keys = d_keys.add(&d_scores.transpose().matmul(&q_hat.slice1(i)));
    }

    // Pre-softmax factor chain.
    let d_q_flat = matricize(&d_q_hat, 2)?; // n x (heads r3)
    let d_head_core = fold(&a_proj.transpose().matmul(&d_q_flat), 2, head_core.dims())?;
    let d_a_proj = d_q_flat.matmul_transposed(&matricize(&head_core, 2)?); // n x r2
    let d_core_pre = mode_product(&d_head_core, &params.u1.transpose(), 1)?;
    let d_u1 = matricize(&d_head_core, 1)?.matmul_transposed(&matricize(&params.core_pre, 1)?);

    let d_u2 = input.x.transpose().matmul(&d_a_proj);
    let mut d_u3 = input.x.transpose().matmul(&d_keys);
    let d_value_factor = input.x.transpose().matmul(&d_values);
    let mut d_x = d_a_proj.matmul_transposed(&params.u2);
    d_x = d_x.add(&d_keys.matmul_transposed(&params.u3));
    d_x = d_x.add(&d_values.matmul_transposed(params.value_factor()));

    let d_ut3 = if params.shared_kv() {
        d_u3 = d_u3.add(&d_value_factor);
        None
    } else {
        Some(d_value_factor)
    };

    Ok(TuckerGrads {
        core_pre: d_core_pre,
        core_post: d_core_post,
        u1: d_u1,
        u2: d_u2,
        u3: d_u3,
        ut1: d_ut1,
        ut2: d_ut2,
        ut3: d_ut3,
        x: d_x,
    })
}

/// Adam with bias correction over a flat list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
        }
    }

    /// One update over concatenated (parameter, gradient) buffer pairs.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.step += 1;
        let bc1 = 1.0 - math::powf(self.beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(self.beta2, self.step as f64);
        let mut offset = 0;
        for (buf, grad) in params.iter_mut().zip(grads) {
            for (value, g) in buf.iter_mut().zip(*grad) {
                let m = &mut self.first_moment[offset];
                let v = &mut self.second_moment[offset];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *value -= self.learning_rate * m_hat / (math::sqrt(v_hat) + self.epsilon);
                offset += 1;
            }
        }
        debug_assert_eq!(offset, self.first_moment.len());
    }
}

/// Weight initialization for the toy trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyInit {
    /// Orthonormal factors with scaled random cores.
    Random,
    /// Factorize a random dense layer at the configured ranks.
    FromMha,
}

/// Configuration of the toy training run.
#[derive(Debug, Clone)]
pub struct ToyTrainConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub ranks: (usize, usize, usize),
    pub shared_kv: bool,
    pub n_tokens: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: ToyInit,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            d_model: 32,
            ranks: (4, 16, 16),
            shared_kv: false,
            n_tokens: 16,
            steps: 200,
            learning_rate: 0.02,
            seed: 0,
            init: ToyInit::Random,
        }
    }
}

/// Result of a toy training run: the per-step loss trace, and whether the
/// run was cut short by a non-finite loss.
#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub losses: Vec<f64>,
    pub diverged: bool,
}

impl ToyTrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Train a single causally masked layer to reproduce the previous token's
/// embedding at every position of one fixed random sequence (full-batch,
/// constant learning rate). The loss is the mean squared error over rows
/// `1..n`; the trace is deterministic given the seed.
pub fn toy_train(config: &ToyTrainConfig) -> Result<ToyTrainOutcome> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("step count must be positive".into()));
    }
    if config.n_tokens < 2 {
        return Err(Error::InvalidArgument(
            "the copy-previous task needs at least two tokens".into(),
        ));
    }
    let mut rng = SeededRng::new(config.seed);
    let x = rng.normal_matrix(config.n_tokens, config.d_model);
    let input = SequenceInput::new(x.clone(), true)?;
    // Target: row m holds the embedding of token m-1 (row 0 is ignored).
    let mut target = Matrix::zeros(config.n_tokens, config.d_model);
    for m in 1..config.n_tokens {
        let prev = x.row(m - 1).to_vec();
        target.row_mut(m).copy_from_slice(&prev);
    }

    let d_head = (config.d_model / config.n_heads) as f64;
    let mut params = match config.init {
        ToyInit::Random => TuckerAttentionParams::random_init(
            config.n_heads,
            config.d_model,
            config.ranks,
            config.ranks,
            config.shared_kv,
            d_head,
            &mut rng,
        )?,
        ToyInit::FromMha => {
            let dense =
                crate::attention::MhaWeights::random(config.n_heads, config.d_model, &mut rng)?;
            mha_to_tucker(&dense, config.ranks, config.ranks, config.shared_kv)?
        }
    };

    let n_params = param_buffers_mut(&mut params)
        .iter()
        .map(|b| b.len())
        .sum();
    let mut optimizer = Adam::new(config.learning_rate, n_params);
    let denom = ((config.n_tokens - 1) * config.d_model) as f64;

    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let out = crate::tucker::tucker_forward(&params, &input, None)?;
        let mut loss = 0.0;
        let mut upstream = Matrix::zeros(config.n_tokens, config.d_model);
        for m in 1..config.n_tokens {
            for c in 0..config.d_model {
                let diff = out.get(m, c) - target.get(m, c);
                loss += diff * diff;
                upstream.set(m, c, 2.0 * diff / denom);
            }
        }
        loss /= denom;
        losses.push(loss);
        if !loss.is_finite() {
            return Ok(ToyTrainOutcome {
                losses,
                diverged: true,
            });
        }
        let grads = tucker_backward(&params, &input, &upstream)?;
        let grad_buffers = grads.buffers();
        let mut buffers = param_buffers_mut(&mut params);
        optimizer.step(&mut buffers, &grad_buffers);
    }
    Ok(ToyTrainOutcome {
        losses,
        diverged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tucker::tucker_forward;

    fn random_setup(
        shared: bool,
        causal: bool,
        seed: u64,
    ) -> (TuckerAttentionParams, SequenceInput, Matrix) {
        let mut rng = SeededRng::new(seed);
        let params =
            TuckerAttentionParams::random_init(2, 8, (2, 4, 4), (2, 4, 4), shared, 4.0, &mut rng)
                .unwrap();
        let x = rng.normal_matrix(5, 8);
        let upstream = rng.normal_matrix(5, 8);
        (params, SequenceInput::new(x, causal).unwrap(), upstream)
    }

    /// Central finite differences on <upstream, forward> for every parameter
    /// and input component; returns the largest relative error against the
    /// analytic gradient (components below the difference noise floor are
    /// skipped).
    fn max_fd_error(
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
        let mut check = |analytic: f64, fd: f64| {
            let mag = analytic.abs().max(fd.abs());
            if mag < 1e-7 {
                return; // below the central-difference noise floor
            }
            worst = worst.max((analytic - fd).abs() / mag);
        };

        let n_buffers = grads.buffers().len();
        for b in 0..n_buffers {
            let len = grads.buffers()[b].len();
            for idx in 0..len {
                let mut plus = params.clone();
                param_buffers_mut(&mut plus)[b][idx] += h;
                let mut minus = params.clone();
                param_buffers_mut(&mut minus)[b][idx] -= h;
                let fd = (loss(&plus, &input.x) - loss(&minus, &input.x)) / (2.0 * h);
                check(grads.buffers()[b][idx], fd);
            }
        }
        for idx in 0..input.x.data().len() {
            let mut plus = input.x.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.x.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss(params, &plus) - loss(params, &minus)) / (2.0 * h);
            check(grads.x.data()[idx], fd);
        }
        worst
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (params, input, _) = random_setup(false, true, 1);
        let zero = Matrix::zeros(5, 8);
        let grads = tucker_backward(&params, &input, &zero).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_scale_linearly_with_upstream() {
        let (params, input, upstream) = random_setup(false, false, 2);
        let g1 = tucker_backward(&params, &input, &upstream).unwrap();
        let g2 = tucker_backward(&params, &input, &upstream.scale(3.0)).unwrap();
        for (a, b) in g1.buffers().iter().zip(g2.buffers()) {
            for (x, y) in a.iter().zip(b) {
                assert!((3.0 * x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matches_finite_differences() {
        for &(shared, causal) in &[(false, false), (false, true), (true, false), (true, true)] {
            let (params, input, upstream) = random_setup(shared, causal, 7);
            let err = max_fd_error(&params, &input, &upstream);
            assert!(err < 1e-4, "fd error {err} shared={shared} causal={causal}");
        }
    }

    #[test]
    fn zero_core_slice_silences_head_factor_column() {
        let (mut params, input, upstream) = random_setup(false, true, 3);
        // Zero the first head-mode slice of the pre core: column 0 of u1
        // multiplies nothing, so its gradient must vanish.
        let (r1, r2, r3) = params.core_pre.dims();
        let mut core = params.core_pre.clone();
        for b in 0..r2 {
            for c in 0..r3 {
                core.set(0, b, c, 0.0);
            }
        }
        let _ = r1;
        params.core_pre = core;
        let grads = tucker_backward(&params, &input, &upstream).unwrap();
        for i in 0..params.u1.rows() {
            assert_eq!(grads.u1.get(i, 0), 0.0);
        }
    }

    #[test]
    fn shared_mode_accumulates_both_paths() {
        // With identical factors, the shared-mode key gradient equals the
        // separated key gradient plus the separated value gradient.
        let (sep_params, input, upstream) = {
            let mut rng = SeededRng::new(4);
            let shared =
                TuckerAttentionParams::random_init(2, 8, (2, 4, 4), (2, 4, 4), true, 4.0, &mut rng)
                    .unwrap();
            let sep = TuckerAttentionParams::new(
                shared.core_pre.clone(),
                shared.core_post.clone(),
                shared.u1.clone(),
                shared.u2.clone(),
                shared.u3.clone(),
                shared.ut1.clone(),
                shared.ut2.clone(),
                Some(shared.u3.clone()),
                shared.scale_dim,
            )
            .unwrap();
            let x = rng.normal_matrix(5, 8);
            let upstream = rng.normal_matrix(5, 8);
            (
                (shared, sep),
                SequenceInput::new(x, true).unwrap(),
                upstream,
            )
        };
        let (shared_params, separated_params) = sep_params;
        let g_shared = tucker_backward(&shared_params, &input, &upstream).unwrap();
        let g_sep = tucker_backward(&separated_params, &input, &upstream).unwrap();
        let want = g_sep.u3.add(g_sep.ut3.as_ref().unwrap());
        assert!(g_shared.u3.max_abs_diff(&want) < 1e-12);
        assert!(g_shared.ut3.is_none());
    }

    #[test]
    fn rejects_upstream_shape_mismatch() {
        let (params, input, _) = random_setup(false, true, 5);
        let bad = Matrix::zeros(4, 8);
        assert!(tucker_backward(&params, &input, &bad).is_err());
    }

    #[test]
    fn toy_train_zero_learning_rate_is_flat() {
        let config = ToyTrainConfig {
            steps: 10,
            learning_rate: 0.0,
            ..ToyTrainConfig::default()
        };
        let outcome = toy_train(&config).unwrap();
        assert!(!outcome.diverged);
        let first = outcome.losses[0];
        assert!(outcome.losses.iter().all(|&l| l == first));
    }

    #[test]
    fn toy_train_default_halves_loss() {
        let outcome = toy_train(&ToyTrainConfig::default()).unwrap();
        assert!(!outcome.diverged);
        let (first, last) = (outcome.losses[0], outcome.final_loss());
        assert!(
            last <= 0.5 * first,
            "loss went from {first} to {last} in 200 steps"
        );
    }

    #[test]
    fn toy_train_deterministic_per_seed() {
        let config = ToyTrainConfig {
            steps: 25,
            seed: 11,
            ..ToyTrainConfig::default()
        };
        let a = toy_train(&config).unwrap();
        let b = toy_train(&config).unwrap();
        assert_eq!(a.losses, b.losses);
        let other = toy_train(&ToyTrainConfig {
            seed: 12,
            ..config
        })
        .unwrap();
        assert_ne!(a.losses, other.losses);
    }

    #[test]
    fn toy_train_converted_init_also_learns() {
        let config = ToyTrainConfig {
            init: ToyInit::FromMha,
            steps: 200,
            ..ToyTrainConfig::default()
        };
        let outcome = toy_train(&config).unwrap();
        assert!(!outcome.diverged);
        assert!(outcome.final_loss() < outcome.losses[0]);
    }

    #[test]
    fn toy_train_reports_divergence_as_outcome() {
        // An absurd learning rate pushes the forward pass out of f64 range;
        // that must surface as an outcome, not a panic.
        let config = ToyTrainConfig {
            steps: 10,
            learning_rate: 1e80,
            ..ToyTrainConfig::default()
        };
        let outcome = toy_train(&config).unwrap();
        assert!(outcome.diverged, "losses: {:?}", outcome.losses.last());
        assert!(outcome.losses.len() < 10);
        assert!(!outcome.final_loss().is_finite());
    }

    #[test]
    fn toy_train_rejects_degenerate_configs() {
        let no_steps = ToyTrainConfig {
            steps: 0,
            ..ToyTrainConfig::default()
        };
        assert!(toy_train(&no_steps).is_err());
        let one_token = ToyTrainConfig {
            n_tokens: 1,
            ..ToyTrainConfig::default()
        };
        assert!(toy_train(&one_token).is_err());
    }
}

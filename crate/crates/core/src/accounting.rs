//! Closed-form parameter counts and KV-cache sizes per attention method,
//! per layer and per model, for arbitrary dimensions and value widths.
//!
//! Counts cover only the attention projection weights (no biases). Megabytes
//! are decimal (1 MB = 10^6 bytes) and formatted by truncation at two
//! decimals, which is the convention the reference footprint figures follow.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};

/// Attention parametrizations with distinct footprint formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMethod {
    /// Evaluating the stacked tensor pair without any factorization.
    DenseTensor,
    Mha,
    Mqa,
    Gqa,
    MlaSeparated,
    MlaShared,
    TuckerSeparated,
    TuckerShared,
}

impl AttentionMethod {
    pub const ALL: [AttentionMethod; 8] = [
        AttentionMethod::DenseTensor,
        AttentionMethod::Mha,
        AttentionMethod::Mqa,
        AttentionMethod::Gqa,
        AttentionMethod::MlaSeparated,
        AttentionMethod::MlaShared,
        AttentionMethod::TuckerSeparated,
        AttentionMethod::TuckerShared,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttentionMethod::DenseTensor => "dense-tensor",
            AttentionMethod::Mha => "mha",
            AttentionMethod::Mqa => "mqa",
            AttentionMethod::Gqa => "gqa",
            AttentionMethod::MlaSeparated => "mla-separated",
            AttentionMethod::MlaShared => "mla-shared",
            AttentionMethod::TuckerSeparated => "tucker-separated",
            AttentionMethod::TuckerShared => "tucker-shared",
        }
    }
}

/// Whether the count is taken during training or after inference-time
/// fusion (the two differ only for the latent methods and the dense tensor
/// row).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

/// Model dimensions feeding the accounting formulas.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub n_heads: u64,
    pub d_model: u64,
    pub d_head: u64,
    /// Cached context length.
    pub n_ctx: u64,
    pub layers: u64,
    /// KV head count for the grouped method.
    pub n_kv: u64,
    /// Latent dimension for the latent methods.
    pub d_c: u64,
    /// Head-mode rank of the factorized method.
    pub r1: u64,
    /// Query/output-mode rank.
    pub r2: u64,
    /// Key/value-mode rank.
    pub r3: u64,
    pub bytes_per_value: u64,
}

impl ModelDims {
    /// The GPT-2 preset: 12 heads of width 64 at d_model 768, context 1024,
    /// 12 layers, 2-byte values.
    pub fn gpt2() -> Self {
        Self {
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            n_ctx: 1024,
            layers: 12,
            n_kv: 2,
            d_c: 128,
            r1: 8,
            r2: 128,
            r3: 128,
            bytes_per_value: 2,
        }
    }

    pub fn with_ranks(mut self, r1: u64, r2: u64, r3: u64) -> Self {
        self.r1 = r1;
        self.r2 = r2;
        self.r3 = r3;
        self
    }

    pub fn with_n_kv(mut self, n_kv: u64) -> Self {
        self.n_kv = n_kv;
        self
    }

    pub fn with_latent(mut self, d_c: u64) -> Self {
        self.d_c = d_c;
        self
    }

    fn validate_for(&self, method: AttentionMethod) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::InvalidArgument(
                "head count and model dimension must be positive".into(),
            ));
        }
        match method {
            AttentionMethod::Mha | AttentionMethod::Mqa | AttentionMethod::Gqa
            | AttentionMethod::DenseTensor => {
                if self.n_heads * self.d_head != self.d_model {
                    return Err(Error::InvalidArgument(format!(
                        "head blocking requires n_heads * d_head == d_model, got {}*{} != {}",
                        self.n_heads, self.d_head, self.d_model
                    )));
                }
                if method == AttentionMethod::Gqa && (self.n_kv == 0 || self.n_heads % self.n_kv != 0)
                {
                    return Err(Error::InvalidArgument(format!(
                        "kv head count {} must divide head count {}",
                        self.n_kv, self.n_heads
                    )));
                }
            }
            AttentionMethod::MlaSeparated | AttentionMethod::MlaShared => {
                if self.d_c == 0 || self.d_c > self.d_model {
                    return Err(Error::InvalidArgument(format!(
                        "latent dimension {} out of range 1..={}",
                        self.d_c, self.d_model
                    )));
                }
            }
            AttentionMethod::TuckerSeparated | AttentionMethod::TuckerShared => {
                if self.r1 == 0 || self.r1 > self.n_heads {
                    return Err(Error::InvalidArgument(format!(
                        "head rank {} out of range 1..={}",
                        self.r1, self.n_heads
                    )));
                }
                if self.r2 == 0 || self.r2 > self.d_model || self.r3 == 0 || self.r3 > self.d_model
                {
                    return Err(Error::InvalidArgument(format!(
                        "mode ranks ({}, {}) out of range 1..={}",
                        self.r2, self.r3, self.d_model
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Attention weight elements per layer for the method in the given phase.
pub fn param_count(method: AttentionMethod, dims: &ModelDims, phase: Phase) -> Result<u64> {
    dims.validate_for(method)?;
    let d = dims.d_model;
    let count = match method {
        AttentionMethod::DenseTensor => match phase {
            Phase::Train => 4 * dims.n_heads * d * d,
            Phase::Inference => 4 * d * d,
        },
        AttentionMethod::Mha => 4 * d * d,
        AttentionMethod::Mqa => 2 * d * d + 2 * dims.d_head * d,
        AttentionMethod::Gqa => 2 * d * d + 2 * dims.n_kv * dims.d_head * d,
        AttentionMethod::MlaSeparated => match phase {
            Phase::Train => d * d + 6 * d * dims.d_c,
            Phase::Inference => d * d + 4 * d * dims.d_c,
        },
        AttentionMethod::MlaShared => match phase {
            Phase::Train => d * d + 5 * d * dims.d_c,
            Phase::Inference => d * d + 2 * d * dims.d_c,
        },
        AttentionMethod::TuckerSeparated => {
            2 * (dims.n_heads * dims.r1 + d * (dims.r2 + dims.r3) + dims.r1 * dims.r2 * dims.r3)
        }
        AttentionMethod::TuckerShared => {
            2 * dims.n_heads * dims.r1
                + d * (2 * dims.r2 + dims.r3)
                + 2 * dims.r1 * dims.r2 * dims.r3
        }
    };
    Ok(count)
}

/// Cached key/value elements per layer at context length `n_ctx`.
pub fn kv_cache_count(method: AttentionMethod, dims: &ModelDims) -> Result<u64> {
    dims.validate_for(method)?;
    let n = dims.n_ctx;
    let count = match method {
        AttentionMethod::DenseTensor => 4 * n * dims.n_heads * dims.d_model,
        AttentionMethod::Mha => 2 * n * dims.d_model,
        AttentionMethod::Mqa => 2 * n * dims.d_head,
        AttentionMethod::Gqa => 2 * n * dims.n_kv * dims.d_head,
        AttentionMethod::MlaSeparated => 2 * n * dims.d_c,
        AttentionMethod::MlaShared => n * dims.d_c,
        AttentionMethod::TuckerSeparated => 2 * n * dims.r3,
        AttentionMethod::TuckerShared => n * dims.r3,
    };
    Ok(count)
}

/// Model-total attention parameter bytes.
pub fn param_bytes_total(method: AttentionMethod, dims: &ModelDims, phase: Phase) -> Result<u64> {
    Ok(param_count(method, dims, phase)? * dims.layers * dims.bytes_per_value)
}

/// Model-total KV cache bytes.
pub fn kv_bytes_total(method: AttentionMethod, dims: &ModelDims) -> Result<u64> {
    Ok(kv_cache_count(method, dims)? * dims.layers * dims.bytes_per_value)
}

/// Decimal megabytes truncated at two decimals, e.g. `56.62`.
pub fn format_mb(bytes: u64) -> String {
    let centi_mb = bytes / 10_000;
    format!("{}.{:02}", centi_mb / 100, centi_mb % 100)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tucker::TuckerAttentionParams;
    use crate::variants::{GqaWeights, MlaWeights};

    #[test]
    fn gpt2_dense_mha_footprint() {
        let dims = ModelDims::gpt2();
        let params = param_bytes_total(AttentionMethod::Mha, &dims, Phase::Train).unwrap();
        assert_eq!(params, 56_623_104);
        assert_eq!(format_mb(params), "56.62");
        let kv = kv_bytes_total(AttentionMethod::Mha, &dims).unwrap();
        assert_eq!(kv, 37_748_736);
        assert_eq!(format_mb(kv), "37.74");
    }

    #[test]
    fn gpt2_grouped_kv_footprint() {
        let dims = ModelDims::gpt2().with_n_kv(2);
        let kv = kv_bytes_total(AttentionMethod::Gqa, &dims).unwrap();
        assert_eq!(kv, 6_291_456);
        assert_eq!(format_mb(kv), "6.29");
    }

    #[test]
    fn gpt2_latent_shared_kv_footprint() {
        let dims = ModelDims::gpt2().with_latent(128);
        let kv = kv_bytes_total(AttentionMethod::MlaShared, &dims).unwrap();
        assert_eq!(kv, 3_145_728);
        assert_eq!(format_mb(kv), "3.14");
    }

    #[test]
    fn gpt2_factorized_kv_footprints() {
        let dims = ModelDims::gpt2().with_ranks(8, 128, 64);
        let sep = kv_bytes_total(AttentionMethod::TuckerSeparated, &dims).unwrap();
        assert_eq!(sep, 3_145_728);
        assert_eq!(format_mb(sep), "3.14");
        let shared = kv_bytes_total(AttentionMethod::TuckerShared, &dims).unwrap();
        assert_eq!(sep, 2 * shared);
    }

    #[test]
    fn per_layer_formulas_match_hand_expansion() {
        let dims = ModelDims::gpt2().with_ranks(8, 128, 128);
        // 2 (n_heads r1 + 2 r d + r1 r^2) with r = 128.
        let expect = 2 * (12 * 8 + 2 * 128 * 768 + 8 * 128 * 128);
        assert_eq!(
            param_count(AttentionMethod::TuckerSeparated, &dims, Phase::Train).unwrap(),
            expect
        );
        // Shared variant: 2 n_heads r1 + 3 r d + 2 r1 r^2.
        let expect_shared = 2 * 12 * 8 + 3 * 128 * 768 + 2 * 8 * 128 * 128;
        assert_eq!(
            param_count(AttentionMethod::TuckerShared, &dims, Phase::Train).unwrap(),
            expect_shared
        );
        // Latent rows at d_c = 128.
        let d = 768;
        assert_eq!(
            param_count(AttentionMethod::MlaShared, &dims, Phase::Train).unwrap(),
            d * d + 5 * d * 128
        );
        assert_eq!(
            param_count(AttentionMethod::MlaShared, &dims, Phase::Inference).unwrap(),
            d * d + 2 * d * 128
        );
        assert_eq!(
            param_count(AttentionMethod::MlaSeparated, &dims, Phase::Inference).unwrap(),
            d * d + 4 * d * 128
        );
        // Unfactored tensor evaluation.
        assert_eq!(
            param_count(AttentionMethod::DenseTensor, &dims, Phase::Train).unwrap(),
            4 * 12 * d * d
        );
        assert_eq!(
            kv_cache_count(AttentionMethod::DenseTensor, &dims).unwrap(),
            4 * 1024 * 12 * d
        );
    }

    #[test]
    fn zero_context_zero_cache() {
        let mut dims = ModelDims::gpt2();
        dims.n_ctx = 0;
        for m in AttentionMethod::ALL {
            assert_eq!(kv_cache_count(m, &dims).unwrap(), 0);
        }
    }

    // The formulas must agree exactly with what the in-memory containers
    // actually allocate.
    #[test]
    fn formulas_match_materialized_containers() {
        let mut rng = SeededRng::new(1);
        let (n_heads, d, d_head) = (4u64, 16u64, 4u64);
        let dims = ModelDims {
            n_heads,
            d_model: d,
            d_head,
            n_ctx: 0,
            layers: 1,
            n_kv: 2,
            d_c: 6,
            r1: 3,
            r2: 5,
            r3: 7,
            bytes_per_value: 8,
        };

        let mha = crate::attention::MhaWeights::random(4, 16, &mut rng).unwrap();
        assert_eq!(
            mha.param_count(),
            param_count(AttentionMethod::Mha, &dims, Phase::Train).unwrap()
        );

        let gqa = GqaWeights::random(4, 2, 16, &mut rng).unwrap();
        assert_eq!(
            gqa.param_count(),
            param_count(AttentionMethod::Gqa, &dims, Phase::Train).unwrap()
        );
        let mqa = GqaWeights::random(4, 1, 16, &mut rng).unwrap();
        assert_eq!(
            mqa.param_count(),
            param_count(AttentionMethod::Mqa, &dims, Phase::Train).unwrap()
        );

        for &shared in &[false, true] {
            let mla = MlaWeights::random(4, 16, 6, 6, shared, &mut rng).unwrap();
            let method = if shared {
                AttentionMethod::MlaShared
            } else {
                AttentionMethod::MlaSeparated
            };
            assert_eq!(
                mla.param_count(),
                param_count(method, &dims, Phase::Train).unwrap()
            );

            let tucker = TuckerAttentionParams::random_init(
                4,
                16,
                (3, 5, 7),
                (3, 5, 7),
                shared,
                4.0,
                &mut rng,
            )
            .unwrap();
            let method = if shared {
                AttentionMethod::TuckerShared
            } else {
                AttentionMethod::TuckerSeparated
            };
            assert_eq!(
                tucker.param_count(),
                param_count(method, &dims, Phase::Train).unwrap()
            );
        }
    }

    #[test]
    fn counts_monotone_in_dimensions() {
        let base = ModelDims {
            n_heads: 4,
            d_model: 16,
            d_head: 4,
            n_ctx: 32,
            layers: 2,
            n_kv: 2,
            d_c: 6,
            r1: 3,
            r2: 5,
            r3: 7,
            bytes_per_value: 2,
        };
        // Growing the context or widening values never shrinks any count.
        for m in AttentionMethod::ALL {
            let kv0 = kv_bytes_total(m, &base).unwrap();
            let mut grown = base;
            grown.n_ctx *= 2;
            assert!(kv_bytes_total(m, &grown).unwrap() >= kv0);
            let mut wide = base;
            wide.bytes_per_value = 4;
            assert!(kv_bytes_total(m, &wide).unwrap() >= kv0);
        }
        // Growing d_model (with matching head width) never shrinks params.
        for m in AttentionMethod::ALL {
            let p0 = param_count(m, &base, Phase::Train).unwrap();
            let mut grown = base;
            grown.d_model = 32;
            grown.d_head = 8;
            assert!(param_count(m, &grown, Phase::Train).unwrap() >= p0);
        }
        // Each method-specific knob is nondecreasing too.
        let grow = |f: fn(&mut ModelDims)| {
            let mut d = base;
            f(&mut d);
            d
        };
        for (m, grown) in [
            (AttentionMethod::Gqa, grow(|d| d.n_kv = 4)),
            (AttentionMethod::MlaShared, grow(|d| d.d_c = 12)),
            (AttentionMethod::MlaSeparated, grow(|d| d.d_c = 12)),
            (AttentionMethod::TuckerSeparated, grow(|d| d.r1 = 4)),
            (AttentionMethod::TuckerSeparated, grow(|d| d.r2 = 9)),
            (AttentionMethod::TuckerShared, grow(|d| d.r3 = 9)),
        ] {
            for phase in [Phase::Train, Phase::Inference] {
                assert!(
                    param_count(m, &grown, phase).unwrap() >= param_count(m, &base, phase).unwrap()
                );
            }
            assert!(kv_cache_count(m, &grown).unwrap() >= kv_cache_count(m, &base).unwrap());
        }
        for m in AttentionMethod::ALL {
            let more_layers = grow(|d| d.layers = 5);
            assert!(
                param_bytes_total(m, &more_layers, Phase::Train).unwrap()
                    >= param_bytes_total(m, &base, Phase::Train).unwrap()
            );
        }
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut dims = ModelDims::gpt2();
        dims.d_head = 63;
        assert!(param_count(AttentionMethod::Mha, &dims, Phase::Train).is_err());
        let mut dims = ModelDims::gpt2();
        dims.n_kv = 5;
        assert!(param_count(AttentionMethod::Gqa, &dims, Phase::Train).is_err());
        let mut dims = ModelDims::gpt2();
        dims.r1 = 13;
        assert!(param_count(AttentionMethod::TuckerShared, &dims, Phase::Train).is_err());
    }

    #[test]
    fn mb_formatting_truncates() {
        assert_eq!(format_mb(37_748_736), "37.74");
        assert_eq!(format_mb(3_145_728), "3.14");
        assert_eq!(format_mb(999_999), "0.99");
        assert_eq!(format_mb(0), "0.00");
    }
}

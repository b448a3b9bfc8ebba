//! Tensor-factorized attention in dense f64 arithmetic.
//!
//! The crate treats the pre-softmax attention weights (query x key) and the
//! post-softmax weights (value x output) of multi-head attention as two
//! order-3 tensors stacked over heads, and parametrizes them in Tucker
//! format: a small core contracted with one basis matrix per mode. On top of
//! that representation it provides:
//!
//! - dense order-3 tensor primitives: matricization, n-mode products, SVD,
//!   truncated SVD, HOSVD, numerical rank ([`tensor`], [`linalg`]);
//! - reference multi-head attention and its tensor-contraction form, used as
//!   the ground truth for every factored path ([`attention`]);
//! - the Tucker-parametrized forward pass, shared-KV variant, latent rotary
//!   embeddings, and incremental KV-cache decoding ([`tucker`], [`rope`]);
//! - GQA/MQA and MLA forward passes with lifts back to the stacked tensor
//!   pair for rank verification ([`variants`]);
//! - weight conversion from dense MHA into GQA, MLA, and Tucker form via
//!   truncated SVD / HOSVD, plus singular-spectrum reports ([`convert`]);
//! - closed-form parameter and KV-cache accounting ([`accounting`]);
//! - chunked online-softmax attention evaluation ([`streaming`]);
//! - analytic gradients of the Tucker forward pass and a toy trainer
//!   ([`grad`]).
//!
//! Everything is `no_std` + `alloc`; transcendentals come from `libm` so
//! results are bit-reproducible across platforms. All operations are pure
//! functions of their inputs and deterministic.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accounting;
pub mod attention;
pub mod convert;
pub mod error;
pub mod grad;
pub mod linalg;
mod math;
pub mod rng;
pub mod rope;
pub mod streaming;
pub mod tensor;
pub mod tucker;
pub mod variants;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tensor3};

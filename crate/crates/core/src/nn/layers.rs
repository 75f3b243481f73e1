//! Parameterized building blocks shared by the encoder, heads and decoder.
//!
//! A layer named `x` owns parameters `x.w`/`x.b` (dense), `x.g`/`x.b`
//! (layer norm), or `x.q`, `x.k`, `x.v`, `x.o` (attention).

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{glorot, ParamStore};
use super::tape::{Mask, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

pub fn init_dense<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Weight matrix without a bias.
pub fn init_matrix<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out));
}

pub fn init_norm<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], T::one()));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub fn init_attention<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        init_dense(store, rng, &format!("{name}.{p}"), d, d);
    }
}

pub fn init_ffn<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, d_ffn: usize) {
    init_dense(store, rng, &format!("{name}.1"), d, d_ffn);
    init_dense(store, rng, &format!("{name}.2"), d_ffn, d);
}

pub fn dense<T: Real>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
    tape.linear(x, &format!("{name}.w"), &format!("{name}.b"))
}

pub fn matrix<T: Real>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"))?;
    tape.matmul(x, w)
}

pub fn norm<T: Real>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(&format!("{name}.g"))?;
    let b = tape.param(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b)
}

/// `relu(x·W1 + b1)·W2 + b2`.
pub fn ffn<T: Real>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
    let h = dense(tape, x, &format!("{name}.1"))?;
    let h = tape.relu(h);
    dense(tape, h, &format!("{name}.2"))
}

/// Multi-head attention of `xq` over `xkv` with output projection.
pub fn attention<T: Real>(
    tape: &mut Tape<'_, T>,
    xq: Var,
    xkv: Var,
    mask: Option<&Arc<Mask>>,
    heads: usize,
    name: &str,
) -> Result<Var> {
    let q = dense(tape, xq, &format!("{name}.q"))?;
    let k = dense(tape, xkv, &format!("{name}.k"))?;
    let v = dense(tape, xkv, &format!("{name}.v"))?;
    let a = tape.masked_attention(q, k, v, mask, heads)?;
    dense(tape, a, &format!("{name}.o"))
}

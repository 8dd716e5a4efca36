//! Transformer encoder over the token sequence.
//!
//! Plain pre-norm blocks with full bidirectional attention across all tokens
//! (templates, search and text alike):
//!
//! ```text
//! x += MHSA(LN(x));  x += MLP(LN(x))      repeated depth times
//! final LN
//! ```
//!
//! Attention is scaled by 1/sqrt(D/heads). A depth of 0 is a documented
//! degenerate mode (final LN only) used by shape and plumbing tests.

use rand::Rng;
use thiserror::Error;

use crate::optim::{ParamGroup, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder expects token width {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        assert!(
            self.dim % self.heads == 0,
            "width {} not divisible by {} heads",
            self.dim,
            self.heads
        );
        self.dim / self.heads
    }
}

/// Weight + bias of one affine map, stored as (out, in) and (out,).
#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub q: AffineParams,
    pub k: AffineParams,
    pub v: AffineParams,
    pub o: AffineParams,
    pub ln2: LayerNormParams,
    pub fc1: AffineParams,
    pub fc2: AffineParams,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
}

pub fn register_affine<R: Rng>(
    ps: &mut ParamSet,
    group: ParamGroup,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    limit: f64,
    rng: &mut R,
) -> AffineParams {
    let w = ps.register(
        &format!("{name}.w"),
        group,
        Tensor::rand_uniform(&[out_dim, in_dim], limit, rng),
    );
    let b = ps.register(&format!("{name}.b"), group, Tensor::zeros(&[out_dim]));
    AffineParams { w, b }
}

pub fn register_layer_norm(
    ps: &mut ParamSet,
    group: ParamGroup,
    name: &str,
    dim: usize,
) -> LayerNormParams {
    let gamma = ps.register(&format!("{name}.gamma"), group, Tensor::ones(&[dim]));
    let beta = ps.register(&format!("{name}.beta"), group, Tensor::zeros(&[dim]));
    LayerNormParams { gamma, beta }
}

pub fn register_encoder<R: Rng>(
    ps: &mut ParamSet,
    cfg: &EncoderConfig,
    prefix: &str,
    rng: &mut R,
) -> EncoderParams {
    let g = ParamGroup::Encoder;
    let d = cfg.dim;
    let h = cfg.mlp_hidden();
    let lim = 0.02;
    let blocks = (0..cfg.depth)
        .map(|i| {
            let p = format!("{prefix}.block{i}");
            BlockParams {
                ln1: register_layer_norm(ps, g, &format!("{p}.ln1"), d),
                q: register_affine(ps, g, &format!("{p}.attn.q"), d, d, lim, rng),
                k: register_affine(ps, g, &format!("{p}.attn.k"), d, d, lim, rng),
                v: register_affine(ps, g, &format!("{p}.attn.v"), d, d, lim, rng),
                o: register_affine(ps, g, &format!("{p}.attn.o"), d, d, lim, rng),
                ln2: register_layer_norm(ps, g, &format!("{p}.ln2"), d),
                fc1: register_affine(ps, g, &format!("{p}.mlp.fc1"), h, d, lim, rng),
                fc2: register_affine(ps, g, &format!("{p}.mlp.fc2"), d, h, lim, rng),
            }
        })
        .collect();
    EncoderParams {
        blocks,
        ln_f: register_layer_norm(ps, g, &format!("{prefix}.ln_f"), d),
    }
}

/// `x · Wᵀ + b` on the tape; `x` is (N, in), result (N, out).
pub fn affine<'t>(tape: &'t Tape, ps: &ParamSet, x: Var<'t>, p: &AffineParams) -> Var<'t> {
    let w = ps.leaf(tape, p.w);
    let b = ps.leaf(tape, p.b);
    let n = x.shape()[0];
    let out = w.shape()[0];
    x.matmul(w.transpose())
        .add(b.reshape(&[1, out]).broadcast_to(&[n, out]))
}

/// Layer norm over the last axis followed by the learned affine terms.
pub fn layer_norm<'t>(tape: &'t Tape, ps: &ParamSet, x: Var<'t>, p: &LayerNormParams) -> Var<'t> {
    let shape = x.shape();
    let d = *shape.last().expect("layer norm on rank-0 input");
    let gamma = ps.leaf(tape, p.gamma).reshape(&[1, d]).broadcast_to(&shape);
    let beta = ps.leaf(tape, p.beta).reshape(&[1, d]).broadcast_to(&shape);
    x.layer_norm_last(LN_EPS).mul(gamma).add(beta)
}

fn attention<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    x: Var<'t>,
    blk: &BlockParams,
    cfg: &EncoderConfig,
) -> Var<'t> {
    let dh = cfg.head_dim();
    let q = affine(tape, ps, x, &blk.q);
    let k = affine(tape, ps, x, &blk.k);
    let v = affine(tape, ps, x, &blk.v);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.narrow(1, h * dh, dh);
        let kh = k.narrow(1, h * dh, dh);
        let vh = v.narrow(1, h * dh, dh);
        let probs = qh.matmul(kh.transpose()).scale(scale).softmax_last();
        heads.push(probs.matmul(vh));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(1, &heads)
    };
    affine(tape, ps, merged, &blk.o)
}

pub fn encoder_block<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    x: Var<'t>,
    blk: &BlockParams,
    cfg: &EncoderConfig,
) -> Var<'t> {
    let x = x.add(attention(tape, ps, layer_norm(tape, ps, x, &blk.ln1), blk, cfg));
    let mlp = affine(
        tape,
        ps,
        affine(tape, ps, layer_norm(tape, ps, x, &blk.ln2), &blk.fc1).gelu(),
        &blk.fc2,
    );
    x.add(mlp)
}

/// Runs the full encoder; output has the same (N, D) shape as the input.
pub fn encode<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    x: Var<'t>,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Var<'t>, EncoderError> {
    let got = *x.shape().last().expect("encoder input must be 2-D");
    if got != cfg.dim {
        return Err(EncoderError::WidthMismatch {
            expected: cfg.dim,
            got,
        });
    }
    let mut x = x;
    for blk in &enc.blocks {
        x = encoder_block(tape, ps, x, blk, cfg);
    }
    Ok(layer_norm(tape, ps, x, &enc.ln_f))
}

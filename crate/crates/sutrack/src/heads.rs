//! Prediction heads: center-based tracking maps and task recognition.
//!
//! The tracking head maps each search token independently through three
//! small affine branches, giving a score map (target-center probability),
//! a per-cell sub-cell offset and a normalized box size, all sigmoided.
//! The task head pools the encoder output into one vector (mean pool by
//! default) and classifies it with a three-layer MLP into the five tasks.

use rand::Rng;
use thiserror::Error;

use crate::embed::SpanSet;
use crate::encoder::{affine, register_affine, AffineParams};
use crate::optim::{ParamGroup, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_TASKS: usize = 5;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("search span has {tokens} tokens, which is not a square grid")]
    NonSquareSearchSpan { tokens: usize },
    #[error("text-token pooling needs a text token in the sequence")]
    NoTextToken,
    #[error("task-token pooling needs a task token in the sequence")]
    NoTaskToken,
}

#[derive(Debug, Clone)]
pub struct TrackHeadParams {
    pub score: AffineParams,
    pub offset: AffineParams,
    pub size: AffineParams,
}

/// Registers the tracking head. The score bias starts at -2 so initial maps
/// sit near sigmoid(-2) = 0.12, close to the mostly-background target.
pub fn register_track_head<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> TrackHeadParams {
    let g = ParamGroup::Other;
    let score = register_affine(ps, g, &format!("{prefix}.score"), 1, dim, 0.02, rng);
    ps.set_value(score.b, Tensor::full(&[1], -2.0));
    TrackHeadParams {
        score,
        offset: register_affine(ps, g, &format!("{prefix}.offset"), 2, dim, 0.02, rng),
        size: register_affine(ps, g, &format!("{prefix}.size"), 2, dim, 0.02, rng),
    }
}

/// Tracking maps over the S×S search grid.
pub struct HeadOutput<'t> {
    /// Target-center probability, shape (S, S).
    pub score: Var<'t>,
    /// Sub-cell center offset in [0,1) per cell, shape (S, S, 2) as (x, y).
    pub offset: Var<'t>,
    /// Box width/height normalized by search side, shape (S, S, 2).
    pub size: Var<'t>,
    pub grid: usize,
}

pub fn track_head<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    search_tokens: Var<'t>,
    p: &TrackHeadParams,
) -> Result<HeadOutput<'t>, HeadError> {
    let tokens = search_tokens.shape()[0];
    let grid = (tokens as f64).sqrt().round() as usize;
    if grid * grid != tokens {
        return Err(HeadError::NonSquareSearchSpan { tokens });
    }
    let score = affine(tape, ps, search_tokens, &p.score)
        .sigmoid()
        .reshape(&[grid, grid]);
    let offset = affine(tape, ps, search_tokens, &p.offset)
        .sigmoid()
        .reshape(&[grid, grid, 2]);
    let size = affine(tape, ps, search_tokens, &p.size)
        .sigmoid()
        .reshape(&[grid, grid, 2]);
    Ok(HeadOutput {
        score,
        offset,
        size,
        grid,
    })
}

/// Which output token(s) feed the task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Mean over every output token, text token included (the default).
    MeanPool,
    /// The text token's output embedding.
    TextToken,
    /// A dedicated learned task token appended to the sequence.
    ExtraTaskToken,
}

/// Pools encoder output tokens (N×D) into a 1×D vector per the mode.
pub fn pool_tokens<'t>(
    tokens: Var<'t>,
    spans: &SpanSet,
    mode: PoolingMode,
) -> Result<Var<'t>, HeadError> {
    match mode {
        PoolingMode::MeanPool => Ok(tokens.mean_rows()),
        PoolingMode::TextToken => {
            let i = spans.text.ok_or(HeadError::NoTextToken)?;
            Ok(tokens.narrow(0, i, 1))
        }
        PoolingMode::ExtraTaskToken => {
            let i = spans.task.ok_or(HeadError::NoTaskToken)?;
            Ok(tokens.narrow(0, i, 1))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskHeadParams {
    pub fc1: AffineParams,
    pub fc2: AffineParams,
    pub fc3: AffineParams,
}

pub fn register_task_head<R: Rng>(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) -> TaskHeadParams {
    let g = ParamGroup::Other;
    TaskHeadParams {
        fc1: register_affine(ps, g, &format!("{prefix}.fc1"), hidden, dim, 0.02, rng),
        fc2: register_affine(ps, g, &format!("{prefix}.fc2"), hidden, hidden, 0.02, rng),
        fc3: register_affine(ps, g, &format!("{prefix}.fc3"), NUM_TASKS, hidden, 0.02, rng),
    }
}

/// Task logits (length 5) from a pooled 1×D vector: three affine layers with
/// two nonlinearities in between. Softmax happens only inside the loss.
pub fn task_logits<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    pooled: Var<'t>,
    p: &TaskHeadParams,
) -> Var<'t> {
    let h1 = affine(tape, ps, pooled, &p.fc1).gelu();
    let h2 = affine(tape, ps, h1, &p.fc2).gelu();
    affine(tape, ps, h2, &p.fc3).reshape(&[NUM_TASKS])
}

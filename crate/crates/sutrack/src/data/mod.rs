//! Synthetic benchmark data: generation, on-disk container, training
//! sampler and tracking metrics.

pub mod container;
pub mod gen;
pub mod metrics;
pub mod sampler;

use thiserror::Error;

use crate::embed::{ModalFrame, Task};
use crate::geom::PixelBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?} at offset 0, expected \"SUTF\"")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: file has {actual} bytes, expected {expected} for the declared shape")]
    Truncated {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: implausible frame shape {h}×{w}×{c} at offset 4")]
    BadShape {
        path: String,
        h: u32,
        w: u32,
        c: u32,
    },
    #[error("{path}: metadata: {message}")]
    BadMeta { path: String, message: String },
    #[error("no sequences available for weighted task {task}")]
    EmptyPool { task: Task },
    #[error("prediction list has {pred} boxes, ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
}

/// One generated video: frames with per-frame ground-truth boxes.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub task: Task,
    pub frames: Vec<ModalFrame>,
    pub boxes: Vec<PixelBox>,
    pub language: Option<String>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

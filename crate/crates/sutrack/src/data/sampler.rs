//! Task-weighted training pair sampler.
//!
//! A training sample is a (template frame, search frame) pair from one
//! sequence, at most `max_gap` frames apart in either direction. Tasks are
//! drawn by weight; the default mix draws the plain RGB task at twice the
//! weight of each auxiliary task, then a sequence of that task uniformly.

use rand::Rng;

use super::{DataError, SyntheticSequence};
use crate::embed::{ModalFrame, Task};
use crate::geom::PixelBox;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleMix {
    /// Per-task draw weights, indexed by [`Task::index`]. Zero removes the
    /// task from the mix.
    pub weights: [f64; Task::ALL.len()],
}

impl Default for SampleMix {
    fn default() -> Self {
        let mut weights = [1.0; Task::ALL.len()];
        weights[Task::Rgb.index()] = 2.0;
        SampleMix { weights }
    }
}

impl SampleMix {
    pub fn single(task: Task) -> Self {
        let mut weights = [0.0; Task::ALL.len()];
        weights[task.index()] = 1.0;
        SampleMix { weights }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Task {
        let total: f64 = self.weights.iter().sum();
        assert!(total > 0.0, "all mix weights are zero");
        let mut r = rng.gen_range(0.0..total);
        for task in Task::ALL {
            let w = self.weights[task.index()];
            if w > 0.0 && r < w {
                return task;
            }
            r -= w;
        }
        // Guard against r landing exactly on the upper edge.
        *Task::ALL
            .iter()
            .rev()
            .find(|t| self.weights[t.index()] > 0.0)
            .unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub task: Task,
    pub template: &'a ModalFrame,
    pub template_box: PixelBox,
    pub search: &'a ModalFrame,
    pub search_box: PixelBox,
}

pub struct Sampler<'a> {
    pool: &'a [SyntheticSequence],
    by_task: Vec<Vec<usize>>,
    mix: SampleMix,
    max_gap: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(
        pool: &'a [SyntheticSequence],
        mix: SampleMix,
        max_gap: usize,
    ) -> Result<Self, DataError> {
        let mut by_task = vec![Vec::new(); Task::ALL.len()];
        for (i, seq) in pool.iter().enumerate() {
            assert!(seq.len() >= 2, "sequence {i} is too short to sample pairs");
            by_task[seq.task.index()].push(i);
        }
        for task in Task::ALL {
            if mix.weights[task.index()] > 0.0 && by_task[task.index()].is_empty() {
                return Err(DataError::EmptyPool { task });
            }
        }
        Ok(Sampler {
            pool,
            by_task,
            mix,
            max_gap,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrainSample<'a> {
        let task = self.mix.draw(rng);
        let ids = &self.by_task[task.index()];
        let seq = &self.pool[ids[rng.gen_range(0..ids.len())]];
        let t = rng.gen_range(0..seq.len());
        let lo = t.saturating_sub(self.max_gap);
        let hi = (t + self.max_gap).min(seq.len() - 1);
        let s = rng.gen_range(lo..=hi);
        TrainSample {
            task,
            template: &seq.frames[t],
            template_box: seq.boxes[t],
            search: &seq.frames[s],
            search_box: seq.boxes[s],
        }
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut impl Rng) -> Vec<TrainSample<'a>> {
        (0..batch).map(|_| self.sample(rng)).collect()
    }
}

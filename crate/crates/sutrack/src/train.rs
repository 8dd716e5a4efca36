//! Training loop, evaluation helpers, and the end-to-end tracking driver.
//!
//! Training is fully deterministic from the config seed: the sampler, crop
//! jitter, and parameter init all derive from it, so two runs with the same
//! config produce bitwise-identical loss curves and checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::metrics::{evaluate, TrackMetrics};
use crate::data::sampler::Sampler;
use crate::data::{DataError, SyntheticSequence};
use crate::embed::ModalFrame;
use crate::geom::PixelBox;
use crate::loss::{total_loss, LossError, SearchGeometry};
use crate::model::{Model, ModelError};
use crate::optim::{AdamW, OptimError};
use crate::tape::{Tape, TapeError};
use crate::tracker::{
    crop_frame, decode, effective_window, template_crop, CropTransform, TrackError, TrackerState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// One loss-curve row; column order mirrors the loss report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub class: f64,
    pub iou: f64,
    pub l1: f64,
    pub task: f64,
    pub total: f64,
}

impl TrainRow {
    pub const CSV_HEADER: &'static str = "step,class,iou,l1,task,total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.class, self.iou, self.l1, self.task, self.total
        )
    }
}

/// Search-region training crop: jitter shifts the window center so the
/// target does not always sit dead center.
fn search_sample(
    frame: &ModalFrame,
    gt: &PixelBox,
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<(ModalFrame, PixelBox), TrainError> {
    let area = gt.width() * gt.height();
    if area <= 0.0 {
        return Err(TrainError::Track(TrackError::ZeroAreaBox));
    }
    let (mut cx, mut cy) = gt.center();
    if cfg.search_jitter > 0.0 {
        cx += rng.gen_range(-cfg.search_jitter..cfg.search_jitter);
        cy += rng.gen_range(-cfg.search_jitter..cfg.search_jitter);
    }
    let mut side = cfg.search_factor * area.sqrt();
    if cfg.search_scale_jitter > 0.0 {
        side *= 1.0 + rng.gen_range(-cfg.search_scale_jitter..cfg.search_scale_jitter);
    }
    let t = CropTransform {
        cx,
        cy,
        side,
        out_res: cfg.search_res,
    };
    Ok((crop_frame(frame, &t), t.box_to_crop(gt)))
}

/// Trains a fresh model on the pool; `on_step` sees one row per step.
pub fn train(
    pool: &[SyntheticSequence],
    cfg: &RunConfig,
    mut on_step: impl FnMut(&TrainRow),
) -> Result<Model, TrainError> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let sampler = Sampler::new(pool, cfg.sample_mix(), cfg.max_frame_gap)?;
    let mut opt = AdamW::new(&model.params, cfg.optim_config());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let weights = cfg.loss_weights();
    let geom = SearchGeometry {
        patch: cfg.patch_size,
    };

    for step in 0..cfg.steps {
        let samples = sampler.sample_batch(cfg.batch, &mut rng);
        let mut sums = [0.0f64; 4];
        for s in &samples {
            let tpl = template_crop(
                s.template,
                &s.template_box,
                cfg.template_factor,
                cfg.template_res,
            )?;
            let (search, gt) = search_sample(s.search, &s.search_box, cfg, &mut rng)?;
            let tape = Tape::new();
            // The one sampled template fills both template slots.
            let out = model.forward(&tape, [&tpl, &tpl], &search)?;
            let (loss, report) =
                total_loss(&tape, &out.head, out.logits, &gt, s.task.index(), geom, &weights)?;
            tape.backward(loss)?;
            model.params.accumulate_from(&tape);
            sums[0] += report.class;
            sums[1] += report.iou;
            sums[2] += report.l1;
            sums[3] += report.task;
        }
        let inv = 1.0 / cfg.batch as f64;
        model.params.scale_grads(inv);
        opt.step(&mut model.params)?;
        model.params.clear_grads();

        let (class, iou, l1, task) =
            (sums[0] * inv, sums[1] * inv, sums[2] * inv, sums[3] * inv);
        on_step(&TrainRow {
            step,
            class,
            iou,
            l1,
            task,
            total: weights.combine(class, iou, l1, task),
        });
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskEval {
    pub accuracy: f64,
    pub mean_ce: f64,
}

/// Task-recognition accuracy and cross-entropy over `n` sampled pairs.
pub fn task_eval(
    model: &Model,
    pool: &[SyntheticSequence],
    n: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<TaskEval, TrainError> {
    let sampler = Sampler::new(pool, cfg.sample_mix(), cfg.max_frame_gap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centered = cfg.clone();
    centered.search_jitter = 0.0;
    centered.search_scale_jitter = 0.0;
    let mut correct = 0usize;
    let mut ce = 0.0;
    for _ in 0..n {
        let s = sampler.sample(&mut rng);
        let tpl = template_crop(
            s.template,
            &s.template_box,
            cfg.template_factor,
            cfg.template_res,
        )?;
        let (search, _) = search_sample(s.search, &s.search_box, &centered, &mut rng)?;
        let (_, logits) = model.forward_maps([&tpl, &tpl], &search)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if pred == s.task.index() {
            correct += 1;
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - logits[s.task.index()];
    }
    Ok(TaskEval {
        accuracy: correct as f64 / n as f64,
        mean_ce: ce / n as f64,
    })
}

/// Tracks one sequence end to end through the state machine. The first
/// frame's ground truth initializes the tracker and is emitted with
/// confidence 1.
pub fn run_tracker(
    model: &Model,
    seq: &SyntheticSequence,
    cfg: &RunConfig,
) -> Result<Vec<(PixelBox, f64)>, TrainError> {
    let tcfg = cfg.tracker_config();
    let mut state = TrackerState::init(&seq.frames[0], seq.boxes[0], &tcfg)?;
    let window = effective_window(model.config().search_grid(), cfg.window_weight)?;
    let mut out = vec![(seq.boxes[0], 1.0)];
    for frame in &seq.frames[1..] {
        let sc = state.search_crop(frame, &tcfg)?;
        let (maps, _) = model.forward_maps(
            [state.static_template(), state.dynamic_template()],
            &sc.frame,
        )?;
        let (bx, conf) = decode(&maps, &sc.transform, &window)?;
        let bx = bx.clamp_to(frame.width(), frame.height());
        // A degenerate clamped box cannot seed the next search crop.
        let bx = if bx.width() > 0.0 && bx.height() > 0.0 {
            bx
        } else {
            state.last_box
        };
        state.advance(frame, bx, conf, &tcfg)?;
        out.push((bx, conf));
    }
    Ok(out)
}

/// Pooled tracking metrics over all sequences, skipping each sequence's
/// given first frame.
pub fn tracking_eval(
    model: &Model,
    seqs: &[SyntheticSequence],
    cfg: &RunConfig,
) -> Result<TrackMetrics, TrainError> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for seq in seqs {
        let track = run_tracker(model, seq, cfg)?;
        pred.extend(track[1..].iter().map(|(b, _)| *b));
        gt.extend_from_slice(&seq.boxes[1..]);
    }
    Ok(evaluate(&pred, &gt)?)
}

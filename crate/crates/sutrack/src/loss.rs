//! Training objective: weighted focal classification, generalized-IoU and L1
//! box regression, and task-recognition cross entropy, combined as
//!
//! ```text
//! total = class + lambda_giou * (1 - GIoU) + lambda_l1 * L1 + task
//! ```
//!
//! All terms are built on the tape so one backward pass reaches every
//! parameter. The box terms supervise the prediction decoded at the
//! ground-truth center cell; the score map is supervised with a Gaussian
//! target centered there.

use thiserror::Error;

use crate::geom::PixelBox;
use crate::heads::HeadOutput;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ground-truth center ({cx}, {cy}) lies outside the search region")]
    CenterOutsideGrid { cx: f64, cy: f64 },
    #[error("score {0} is outside the open interval (0,1)")]
    ScoreOutOfRange(f64),
    #[error("ground-truth box has zero area")]
    ZeroAreaGt,
    #[error("box has inverted corners (x1 < x0 or y1 < y0)")]
    InvertedBox,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

impl LossWeights {
    /// The total in its fixed evaluation order; [`LossReport::total`] equals
    /// this combination of the other fields bitwise.
    pub fn combine(&self, class: f64, iou: f64, l1: f64, task: f64) -> f64 {
        ((class + self.lambda_giou * iou) + self.lambda_l1 * l1) + task
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub class: f64,
    /// The 1 - GIoU term, before weighting.
    pub iou: f64,
    pub l1: f64,
    pub task: f64,
    pub total: f64,
}

/// Gaussian score target over the S×S search grid. The ground-truth center
/// cell gets exactly 1; a cell at lattice distance d gets exp(-d²/(2σ²))
/// with σ = max(1, box diagonal in cells / 6).
pub fn focal_target(gt: &PixelBox, grid: usize, patch: usize) -> Result<Tensor, LossError> {
    let (cx, cy) = gt.center();
    let side = (grid * patch) as f64;
    if !(0.0..side).contains(&cx) || !(0.0..side).contains(&cy) {
        return Err(LossError::CenterOutsideGrid { cx, cy });
    }
    let j0 = (cx / patch as f64).floor() as usize;
    let i0 = (cy / patch as f64).floor() as usize;
    let diag_cells = gt.width().hypot(gt.height()) / patch as f64;
    let sigma = (diag_cells / 6.0).max(1.0);
    let mut data = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            if (i, j) == (i0, j0) {
                data.push(1.0);
            } else {
                let d2 = (i as f64 - i0 as f64).powi(2) + (j as f64 - j0 as f64).powi(2);
                data.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    Ok(Tensor::new(vec![grid, grid], data))
}

/// Center-weighted focal loss between a score map (strictly inside (0,1))
/// and a target map in [0,1]:
///
/// ```text
/// -(1/n_pos) * sum over cells of
///     y == 1:  (1-p)^alpha * ln p
///     y < 1:   (1-y)^beta * p^alpha * ln(1-p)
/// ```
pub fn weighted_focal<'t>(
    tape: &'t Tape,
    score: Var<'t>,
    target: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Var<'t>, LossError> {
    let p_vals = score.value();
    assert_eq!(
        p_vals.shape(),
        target.shape(),
        "score and target shapes differ"
    );
    for &p in p_vals.data() {
        if !(p > 0.0 && p < 1.0) {
            return Err(LossError::ScoreOutOfRange(p));
        }
    }
    let n_pos = target.data().iter().filter(|&&y| y == 1.0).count();
    assert!(n_pos >= 1, "focal target has no positive cell");

    let pos_mask = tape.constant(target.map(|y| f64::from(y == 1.0)));
    let neg_weight = tape.constant(target.map(|y| {
        if y == 1.0 {
            0.0
        } else {
            (1.0 - y).powf(beta)
        }
    }));
    let one_minus_p = score.neg().shift(1.0);
    let pos_part = pos_mask
        .mul(one_minus_p.pow_scalar(alpha))
        .mul(score.log());
    let neg_part = neg_weight
        .mul(score.pow_scalar(alpha))
        .mul(one_minus_p.log());
    Ok(pos_part
        .add(neg_part)
        .sum_all()
        .scale(-1.0 / n_pos as f64))
}

fn corner<'t>(b: Var<'t>, i: usize) -> Var<'t> {
    b.narrow(0, i, 1)
}

/// Generalized IoU between two boxes given as (x0, y0, x1, y1) vectors on
/// the tape. The second box is the reference and must have positive area;
/// a zero-area first box is well defined.
pub fn giou<'t>(tape: &'t Tape, pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>, LossError> {
    for b in [&pred, &gt] {
        let v = b.value();
        assert_eq!(v.shape(), &[4], "box must be a 4-vector");
        if v.data()[2] < v.data()[0] || v.data()[3] < v.data()[1] {
            return Err(LossError::InvertedBox);
        }
    }
    {
        let g = gt.value();
        if (g.data()[2] - g.data()[0]) * (g.data()[3] - g.data()[1]) <= 0.0 {
            return Err(LossError::ZeroAreaGt);
        }
    }
    let zero = tape.constant(Tensor::zeros(&[1]));
    let (px0, py0, px1, py1) = (corner(pred, 0), corner(pred, 1), corner(pred, 2), corner(pred, 3));
    let (gx0, gy0, gx1, gy1) = (corner(gt, 0), corner(gt, 1), corner(gt, 2), corner(gt, 3));

    let iw = px1.minimum(gx1).sub(px0.maximum(gx0)).maximum(zero);
    let ih = py1.minimum(gy1).sub(py0.maximum(gy0)).maximum(zero);
    let inter = iw.mul(ih);
    let area_p = px1.sub(px0).mul(py1.sub(py0));
    let area_g = gx1.sub(gx0).mul(gy1.sub(gy0));
    let union = area_p.add(area_g).sub(inter);
    let hull = px1
        .maximum(gx1)
        .sub(px0.minimum(gx0))
        .mul(py1.maximum(gy1).sub(py0.minimum(gy0)));
    let iou = inter.div(union);
    let giou = iou.sub(hull.sub(union).div(hull));
    Ok(giou.reshape(&[]))
}

/// Cross entropy of the task logits against the true task index
/// (softmax + negative log likelihood, computed as a stable log-sum-exp).
pub fn task_ce<'t>(tape: &'t Tape, logits: Var<'t>, true_task: usize) -> Var<'t> {
    let _ = tape;
    let values = logits.value();
    assert_eq!(values.rank(), 1, "logits must be a vector");
    assert!(true_task < values.numel(), "true task index out of range");
    let m = values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.shift(-m).exp().sum_all().log().shift(m);
    lse.sub(logits.narrow(0, true_task, 1).reshape(&[]))
}

/// Everything the box terms need to know about the search region.
#[derive(Debug, Clone, Copy)]
pub struct SearchGeometry {
    /// Patch size in pixels.
    pub patch: usize,
}

/// Builds the full objective for one sample and returns the scalar loss
/// variable plus the per-term report. `gt_box` is in search-region pixels.
pub fn total_loss<'t>(
    tape: &'t Tape,
    head: &HeadOutput<'t>,
    logits: Var<'t>,
    gt_box: &PixelBox,
    true_task: usize,
    geom: SearchGeometry,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport), LossError> {
    let grid = head.grid;
    let patch = geom.patch;
    let side = (grid * patch) as f64;

    let target = focal_target(gt_box, grid, patch)?;
    let class = weighted_focal(tape, head.score, &target, weights.focal_alpha, weights.focal_beta)?;

    let (cx, cy) = gt_box.center();
    let j0 = (cx / patch as f64).floor() as usize;
    let i0 = (cy / patch as f64).floor() as usize;
    let off = head.offset.narrow(0, i0, 1).narrow(1, j0, 1).reshape(&[2]);
    let size = head.size.narrow(0, i0, 1).narrow(1, j0, 1).reshape(&[2]);

    let s = grid as f64;
    let pcx = off.narrow(0, 0, 1).shift(j0 as f64).scale(1.0 / s);
    let pcy = off.narrow(0, 1, 1).shift(i0 as f64).scale(1.0 / s);
    let pw = size.narrow(0, 0, 1);
    let ph = size.narrow(0, 1, 1);

    let half_w = pw.scale(0.5);
    let half_h = ph.scale(0.5);
    let pred_corners = tape.concat(
        0,
        &[
            pcx.sub(half_w),
            pcy.sub(half_h),
            pcx.add(half_w),
            pcy.add(half_h),
        ],
    );
    let gt_corners = tape.constant(Tensor::new(
        vec![4],
        vec![
            gt_box.x0 / side,
            gt_box.y0 / side,
            gt_box.x1 / side,
            gt_box.y1 / side,
        ],
    ));
    let g = giou(tape, pred_corners, gt_corners)?;
    let iou_term = g.neg().shift(1.0);

    let pred_cwh = tape.concat(0, &[pcx, pcy, pw, ph]);
    let (gcx, gcy) = gt_box.center();
    let gt_cwh = tape.constant(Tensor::new(
        vec![4],
        vec![
            gcx / side,
            gcy / side,
            gt_box.width() / side,
            gt_box.height() / side,
        ],
    ));
    let l1 = pred_cwh.sub(gt_cwh).abs().mean_all();

    let task = task_ce(tape, logits, true_task);

    let total = class
        .add(iou_term.scale(weights.lambda_giou))
        .add(l1.scale(weights.lambda_l1))
        .add(task);

    let report = LossReport {
        class: class.item(),
        iou: iou_term.item(),
        l1: l1.item(),
        task: task.item(),
        total: total.item(),
    };
    Ok((total, report))
}

//! Tracking quality metrics over per-frame box pairs.

use super::DataError;
use crate::geom::PixelBox;

pub const PRECISION_RADIUS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrackMetrics {
    /// Mean over 21 overlap thresholds 0.00, 0.05, .., 1.00 of the fraction
    /// of frames whose IoU strictly exceeds the threshold.
    pub success_auc: f64,
    /// Fraction of frames whose predicted center lies within 20px of the
    /// ground-truth center (inclusive).
    pub precision: f64,
    pub mean_iou: f64,
}

pub fn evaluate(pred: &[PixelBox], gt: &[PixelBox]) -> Result<TrackMetrics, DataError> {
    if pred.len() != gt.len() {
        return Err(DataError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    assert!(!pred.is_empty(), "metrics need at least one frame");
    let n = pred.len() as f64;

    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let mean_iou = ious.iter().sum::<f64>() / n;

    let mut auc_sum = 0.0;
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        let hits = ious.iter().filter(|&&v| v > t).count();
        auc_sum += hits as f64 / n;
    }
    let success_auc = auc_sum / 21.0;

    let close = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let (px, py) = p.center();
            let (gx, gy) = g.center();
            ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= PRECISION_RADIUS
        })
        .count();
    let precision = close as f64 / n;

    Ok(TrackMetrics {
        success_auc,
        precision,
        mean_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(x0: f64, y0: f64) -> PixelBox {
        PixelBox::new(x0, y0, x0 + 10.0, y0 + 10.0)
    }

    #[test]
    fn perfect_prediction_scores_twenty_of_twenty_one() {
        let gt = vec![unit_box(0.0, 0.0), unit_box(5.0, 5.0)];
        let m = evaluate(&gt, &gt).unwrap();
        // IoU 1.0 strictly exceeds every threshold except 1.0 itself.
        assert_eq!(m.success_auc, 20.0 / 21.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let pred = vec![unit_box(0.0, 0.0)];
        let gt = vec![unit_box(100.0, 100.0)];
        let m = evaluate(&pred, &gt).unwrap();
        assert_eq!(m.success_auc, 0.0);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.mean_iou, 0.0);
    }

    #[test]
    fn precision_radius_is_inclusive() {
        let gt = vec![unit_box(0.0, 0.0), unit_box(0.0, 0.0)];
        let pred = vec![unit_box(20.0, 0.0), unit_box(21.0, 0.0)];
        let m = evaluate(&pred, &gt).unwrap();
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn half_overlap_auc() {
        // IoU of [0,10]x[0,10] vs [5,15]x[0,10] is 50/150 = 1/3.
        let pred = vec![PixelBox::new(5.0, 0.0, 15.0, 10.0)];
        let gt = vec![unit_box(0.0, 0.0)];
        let m = evaluate(&pred, &gt).unwrap();
        assert!((m.mean_iou - 1.0 / 3.0).abs() < 1e-15);
        // Thresholds strictly below 1/3: 0.00 through 0.30, seven of them.
        assert_eq!(m.success_auc, 7.0 / 21.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = vec![unit_box(0.0, 0.0)];
        let b = vec![unit_box(0.0, 0.0), unit_box(1.0, 1.0)];
        assert!(matches!(
            evaluate(&a, &b),
            Err(DataError::LengthMismatch { pred: 1, gt: 2 })
        ));
    }
}

//! Inference-time cropping, decoding, and tracker state.
//!
//! The tracker keeps two square template crops (a static one from the first
//! frame and a dynamic one refreshed on a schedule) plus the last predicted
//! box. Each step crops a search region around the last box, runs the model,
//! decodes the penalized score maps back to frame coordinates, and advances
//! the state machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::ModalFrame;
use crate::geom::PixelBox;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("cannot crop around a zero-area box")]
    ZeroAreaBox,
    #[error("penalty window needs at least 2 cells per side, got {side}")]
    WindowTooSmall { side: usize },
    #[error("score map of {score} cells does not match a {grid}x{grid} grid")]
    GridMismatch { score: usize, grid: usize },
}

/// Square crop window in frame coordinates together with its output
/// resolution; maps points between frame and crop pixel spaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_res: usize,
}

impl CropTransform {
    pub fn around(bx: &PixelBox, factor: f64, out_res: usize) -> Result<Self, TrackError> {
        let area = bx.width() * bx.height();
        if area <= 0.0 {
            return Err(TrackError::ZeroAreaBox);
        }
        let (cx, cy) = bx.center();
        Ok(CropTransform {
            cx,
            cy,
            side: factor * area.sqrt(),
            out_res,
        })
    }

    pub fn scale(&self) -> f64 {
        self.out_res as f64 / self.side
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let (ox, oy) = self.origin();
        ((x - ox) * self.scale(), (y - oy) * self.scale())
    }

    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (ox, oy) = self.origin();
        (ox + x / self.scale(), oy + y / self.scale())
    }

    pub fn box_to_crop(&self, bx: &PixelBox) -> PixelBox {
        let (x0, y0) = self.to_crop(bx.x0, bx.y0);
        let (x1, y1) = self.to_crop(bx.x1, bx.y1);
        PixelBox::new(x0, y0, x1, y1)
    }

    pub fn box_to_frame(&self, bx: &PixelBox) -> PixelBox {
        let (x0, y0) = self.to_frame(bx.x0, bx.y0);
        let (x1, y1) = self.to_frame(bx.x1, bx.y1);
        PixelBox::new(x0, y0, x1, y1)
    }
}

/// Nearest-neighbor resample of an H×W×C image into the crop window.
/// Out-of-frame pixels take the per-channel mean of the in-frame samples
/// (mid gray if the window misses the frame entirely).
pub fn crop_image(img: &Tensor, t: &CropTransform) -> Tensor {
    assert_eq!(img.rank(), 3, "crop expects H×W×C");
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = t.out_res;
    let (ox, oy) = t.origin();
    let inv = 1.0 / t.scale();

    let mut out = Tensor::zeros(&[r, r, c]);
    let mut outside = Vec::new();
    let mut mean = vec![0.0f64; c];
    let mut inside = 0usize;
    for io in 0..r {
        let ys = oy + (io as f64 + 0.5) * inv;
        let i = ys.floor();
        for jo in 0..r {
            let xs = ox + (jo as f64 + 0.5) * inv;
            let j = xs.floor();
            if i >= 0.0 && i < h as f64 && j >= 0.0 && j < w as f64 {
                let (i, j) = (i as usize, j as usize);
                for ch in 0..c {
                    let v = img.at(&[i, j, ch]);
                    out.set(&[io, jo, ch], v);
                    mean[ch] += v;
                }
                inside += 1;
            } else {
                outside.push((io, jo));
            }
        }
    }
    for m in &mut mean {
        *m = if inside > 0 { *m / inside as f64 } else { 0.5 };
    }
    for (io, jo) in outside {
        for ch in 0..c {
            out.set(&[io, jo, ch], mean[ch]);
        }
    }
    out
}

/// Crops every modality of a frame through the same transform.
pub fn crop_frame(frame: &ModalFrame, t: &CropTransform) -> ModalFrame {
    let rgb = crop_image(&frame.rgb, t);
    let aux = frame.aux.as_ref().map(|a| crop_image(a, t));
    ModalFrame::new(frame.task, rgb, aux, frame.language.clone())
        .expect("cropping preserves frame validity")
}

/// S×S Hann window, zero at the borders and 1 at the center.
pub fn hanning_window(side: usize) -> Result<Tensor, TrackError> {
    if side < 2 {
        return Err(TrackError::WindowTooSmall { side });
    }
    let denom = (side - 1) as f64;
    let line: Vec<f64> = (0..side)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / denom).cos()))
        .collect();
    let mut w = Tensor::zeros(&[side, side]);
    for i in 0..side {
        for j in 0..side {
            w.set(&[i, j], line[i] * line[j]);
        }
    }
    Ok(w)
}

/// Blend between a flat window (weight 0) and a full Hann window (weight 1).
pub fn effective_window(side: usize, weight: f64) -> Result<Tensor, TrackError> {
    let hann = hanning_window(side)?;
    Ok(hann.map(|v| (1.0 - weight) + weight * v))
}

/// Value-level model outputs over the search grid: [S,S] scores in (0,1),
/// [S,S,2] sub-cell center offsets, [S,S,2] sizes as fractions of the
/// search side.
#[derive(Debug, Clone)]
pub struct TrackMaps {
    pub score: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl TrackMaps {
    pub fn grid(&self) -> usize {
        self.score.shape()[0]
    }
}

/// Picks the penalized peak and decodes it to a frame-coordinate box.
/// Confidence is the unpenalized score at the chosen cell.
pub fn decode(
    maps: &TrackMaps,
    t: &CropTransform,
    window: &Tensor,
) -> Result<(PixelBox, f64), TrackError> {
    let grid = maps.grid();
    if maps.score.numel() != grid * grid || window.shape() != [grid, grid] {
        return Err(TrackError::GridMismatch {
            score: maps.score.numel(),
            grid,
        });
    }
    let mut best = (0usize, 0usize);
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            let v = maps.score.at(&[i, j]) * window.at(&[i, j]);
            if v > best_val {
                best_val = v;
                best = (i, j);
            }
        }
    }
    let (i, j) = best;
    let cell = t.out_res as f64 / grid as f64;
    let cx_crop = (j as f64 + maps.offset.at(&[i, j, 0])) * cell;
    let cy_crop = (i as f64 + maps.offset.at(&[i, j, 1])) * cell;
    let w_crop = maps.size.at(&[i, j, 0]) * t.out_res as f64;
    let h_crop = maps.size.at(&[i, j, 1]) * t.out_res as f64;
    let crop_box = PixelBox::from_center(cx_crop, cy_crop, w_crop, h_crop);
    Ok((t.box_to_frame(&crop_box), maps.score.at(&[i, j])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    pub template_res: usize,
    pub search_res: usize,
    pub update_interval: usize,
    pub confidence_threshold: f64,
    pub window_weight: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            template_factor: 2.0,
            search_factor: 4.0,
            template_res: 32,
            search_res: 64,
            update_interval: 25,
            confidence_threshold: 0.7,
            window_weight: 1.0,
        }
    }
}

/// A template crop plus the target box in crop coordinates.
#[derive(Debug, Clone)]
pub struct TemplateCrop {
    pub frame: ModalFrame,
    pub bx: PixelBox,
}

pub fn template_crop(
    frame: &ModalFrame,
    bx: &PixelBox,
    factor: f64,
    out_res: usize,
) -> Result<TemplateCrop, TrackError> {
    let t = CropTransform::around(bx, factor, out_res)?;
    Ok(TemplateCrop {
        frame: crop_frame(frame, &t),
        bx: t.box_to_crop(bx),
    })
}

/// Search crop around the previous box, with the transform needed to map
/// decoded boxes back to frame coordinates.
#[derive(Debug, Clone)]
pub struct SearchCrop {
    pub frame: ModalFrame,
    pub transform: CropTransform,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    static_template: TemplateCrop,
    dynamic_template: TemplateCrop,
    pub last_box: PixelBox,
    pub last_confidence: f64,
    pub frame_index: usize,
}

impl TrackerState {
    pub fn init(
        frame: &ModalFrame,
        bx: PixelBox,
        cfg: &TrackerConfig,
    ) -> Result<Self, TrackError> {
        let tpl = template_crop(frame, &bx, cfg.template_factor, cfg.template_res)?;
        Ok(TrackerState {
            static_template: tpl.clone(),
            dynamic_template: tpl,
            last_box: bx,
            last_confidence: 1.0,
            frame_index: 0,
        })
    }

    pub fn static_template(&self) -> &TemplateCrop {
        &self.static_template
    }

    pub fn dynamic_template(&self) -> &TemplateCrop {
        &self.dynamic_template
    }

    pub fn search_crop(
        &self,
        frame: &ModalFrame,
        cfg: &TrackerConfig,
    ) -> Result<SearchCrop, TrackError> {
        let t = CropTransform::around(&self.last_box, cfg.search_factor, cfg.search_res)?;
        Ok(SearchCrop {
            frame: crop_frame(frame, &t),
            transform: t,
        })
    }

    /// Records a prediction for the next frame. The dynamic template is
    /// refreshed from the current frame only when the new frame index lands
    /// on the update interval and confidence clears the threshold; the
    /// static template never changes. Returns whether a refresh happened.
    pub fn advance(
        &mut self,
        frame: &ModalFrame,
        bx: PixelBox,
        confidence: f64,
        cfg: &TrackerConfig,
    ) -> Result<bool, TrackError> {
        self.frame_index += 1;
        self.last_box = bx;
        self.last_confidence = confidence;
        let refresh = self.frame_index % cfg.update_interval == 0
            && confidence > cfg.confidence_threshold;
        if refresh {
            self.dynamic_template =
                template_crop(frame, &bx, cfg.template_factor, cfg.template_res)?;
        }
        Ok(refresh)
    }
}

/// One result line: frame index, box corners, confidence.
pub fn result_line(frame_index: usize, bx: &PixelBox, confidence: f64) -> String {
    format!(
        "{frame_index} {} {} {} {} {confidence}",
        bx.x0, bx.y0, bx.x1, bx.y1
    )
}

/// Parses a [`result_line`]; `None` on any malformed field.
pub fn parse_result_line(line: &str) -> Option<(usize, PixelBox, f64)> {
    let mut it = line.split_whitespace();
    let idx: usize = it.next()?.parse().ok()?;
    let mut f = || -> Option<f64> { it.next()?.parse().ok() };
    let (x0, y0, x1, y1, conf) = (f()?, f()?, f()?, f()?, f()?);
    if it.next().is_some() {
        return None;
    }
    Some((idx, PixelBox::new(x0, y0, x1, y1), conf))
}

//! Synthetic five-task sequence generator.
//!
//! Each sequence shows one colored geometric target moving over a static
//! textured background with static distractor shapes. The auxiliary channel
//! carries a task-specific law:
//!
//! * depth: vertical background gradient plus a bright near-field target
//! * thermal: cool background, hot target, cold distractors
//! * event: per-pixel absolute temporal difference of the RGB frames
//! * language: no auxiliary image; a "color shape" description instead
//!
//! The camouflage regime (thermal task) copies background pixels over the
//! target in RGB, so only the thermal channel localizes it while distractors
//! stay RGB-visible and thermally cold.
//!
//! Every stored pixel is quantized through f32 at creation, making the
//! on-disk round trip bitwise. Sequences are bitwise reproducible from
//! (descriptor, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SyntheticSequence;
use crate::embed::{ModalFrame, Task};
use crate::geom::PixelBox;
use crate::tensor::Tensor;

pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.90]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("cyan", [0.20, 0.80, 0.85]),
];

const BG_BASE: [f64; 3] = [0.35, 0.40, 0.45];
const BG_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Square,
    Disc,
}

impl TargetShape {
    pub fn name(self) -> &'static str {
        match self {
            TargetShape::Square => "square",
            TargetShape::Disc => "disc",
        }
    }
}

/// Generator parameters; a (descriptor, seed) pair fully determines the
/// sequence.
#[derive(Debug, Clone)]
pub struct GenDescriptor {
    pub task: Task,
    pub frame_size: usize,
    pub target_size: usize,
    pub shape: TargetShape,
    /// Index into [`PALETTE`].
    pub color_index: usize,
    /// Pixels per frame; reflected at frame borders.
    pub velocity: (f64, f64),
    pub distractors: usize,
    pub camouflage: bool,
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-pixel noise in [-1, 1).
fn pixel_noise(seed: u64, i: usize, j: usize, ch: usize) -> f64 {
    let key = seed
        .wrapping_mul(0x0100_0000_01b3)
        .wrapping_add((i as u64) << 40)
        .wrapping_add((j as u64) << 20)
        .wrapping_add(ch as u64);
    let u = (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * u - 1.0
}

struct Sprite {
    bx: PixelBox,
    shape: TargetShape,
    color: [f64; 3],
}

impl Sprite {
    fn covers(&self, i: usize, j: usize) -> bool {
        let x = j as f64 + 0.5;
        let y = i as f64 + 0.5;
        if !(self.bx.x0 <= x && x < self.bx.x1 && self.bx.y0 <= y && y < self.bx.y1) {
            return false;
        }
        match self.shape {
            TargetShape::Square => true,
            TargetShape::Disc => {
                let (cx, cy) = self.bx.center();
                let rx = self.bx.width() / 2.0;
                let ry = self.bx.height() / 2.0;
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn integer_box(cx: f64, cy: f64, size: usize, frame: usize) -> PixelBox {
    let half = size as f64 / 2.0;
    let max0 = (frame - size) as f64;
    let x0 = (cx - half).round().clamp(0.0, max0);
    let y0 = (cy - half).round().clamp(0.0, max0);
    PixelBox::new(x0, y0, x0 + size as f64, y0 + size as f64)
}

pub fn generate(desc: &GenDescriptor, seed: u64, length: usize) -> SyntheticSequence {
    assert!(length >= 2, "sequences need at least 2 frames");
    assert!(
        desc.target_size < desc.frame_size,
        "target does not fit in the frame"
    );
    let n = desc.frame_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Static background: base color plus frozen per-pixel noise.
    let bg_seed: u64 = rng.gen();
    let mut background = Tensor::zeros(&[n, n, 3]);
    for i in 0..n {
        for j in 0..n {
            for ch in 0..3 {
                let v = BG_BASE[ch] + BG_NOISE * pixel_noise(bg_seed, i, j, ch);
                background.set(&[i, j, ch], q32(v.clamp(0.0, 1.0)));
            }
        }
    }

    let (color_name, target_color) = PALETTE[desc.color_index % PALETTE.len()];

    // Static distractors, colored differently from the target.
    let distractors: Vec<Sprite> = (0..desc.distractors)
        .map(|k| {
            let size = desc.target_size;
            let x0 = rng.gen_range(0..=(n - size)) as f64;
            let y0 = rng.gen_range(0..=(n - size)) as f64;
            let color = PALETTE[(desc.color_index + 1 + k) % PALETTE.len()].1;
            Sprite {
                bx: PixelBox::new(x0, y0, x0 + size as f64, y0 + size as f64),
                shape: desc.shape,
                color,
            }
        })
        .collect();

    let half = desc.target_size as f64 / 2.0;
    let mut cx = rng.gen_range(half..(n as f64 - half));
    let mut cy = rng.gen_range(half..(n as f64 - half));
    let (mut vx, mut vy) = desc.velocity;

    let language = match desc.task {
        Task::Rgbl => Some(format!("{color_name} {}", desc.shape.name())),
        _ => None,
    };

    let mut frames = Vec::with_capacity(length);
    let mut boxes = Vec::with_capacity(length);
    let mut prev_rgb: Option<Tensor> = None;

    for _ in 0..length {
        let bx = integer_box(cx, cy, desc.target_size, n);
        let target = Sprite {
            bx,
            shape: desc.shape,
            color: target_color,
        };

        let mut rgb = background.clone();
        for d in &distractors {
            paint(&mut rgb, d);
        }
        if !desc.camouflage {
            paint(&mut rgb, &target);
        }

        let aux = match desc.task {
            Task::Rgb | Task::Rgbl => None,
            Task::Rgbd => Some(depth_map(n, &target, &distractors)),
            Task::Rgbt => Some(thermal_map(n, bg_seed, &target, &distractors)),
            Task::Rgbe => Some(event_map(&rgb, prev_rgb.as_ref())),
        };
        prev_rgb = Some(rgb.clone());

        frames.push(
            ModalFrame::new(desc.task, rgb, aux, language.clone())
                .expect("generator produces valid frames"),
        );
        boxes.push(bx);

        // Advance and reflect so the next box stays fully inside.
        cx += vx;
        cy += vy;
        if cx - half < 0.0 {
            cx = half + (half - cx);
            vx = vx.abs();
        }
        if cx + half > n as f64 {
            cx = 2.0 * (n as f64 - half) - cx;
            vx = -vx.abs();
        }
        if cy - half < 0.0 {
            cy = half + (half - cy);
            vy = vy.abs();
        }
        if cy + half > n as f64 {
            cy = 2.0 * (n as f64 - half) - cy;
            vy = -vy.abs();
        }
    }

    SyntheticSequence {
        task: desc.task,
        frames,
        boxes,
        language,
    }
}

fn paint(img: &mut Tensor, sprite: &Sprite) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let i0 = sprite.bx.y0.max(0.0) as usize;
    let i1 = (sprite.bx.y1.ceil() as usize).min(h);
    let j0 = sprite.bx.x0.max(0.0) as usize;
    let j1 = (sprite.bx.x1.ceil() as usize).min(w);
    for i in i0..i1 {
        for j in j0..j1 {
            if sprite.covers(i, j) {
                for ch in 0..3 {
                    img.set(&[i, j, ch], q32(sprite.color[ch]));
                }
            }
        }
    }
}

fn grayscale(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut img = Tensor::zeros(&[n, n, 3]);
    for i in 0..n {
        for j in 0..n {
            let v = q32(f(i, j).clamp(0.0, 1.0));
            for ch in 0..3 {
                img.set(&[i, j, ch], v);
            }
        }
    }
    img
}

/// Inverse depth: background recedes down a vertical gradient, distractors
/// sit mid-field, the target is nearest and brightest.
fn depth_map(n: usize, target: &Sprite, distractors: &[Sprite]) -> Tensor {
    grayscale(n, |i, j| {
        if target.covers(i, j) {
            0.85
        } else if distractors.iter().any(|d| d.covers(i, j)) {
            0.45
        } else {
            0.15 + 0.25 * (i as f64 / n as f64)
        }
    })
}

/// Thermal: cool noisy background, hot target, cold distractors.
fn thermal_map(n: usize, noise_seed: u64, target: &Sprite, distractors: &[Sprite]) -> Tensor {
    grayscale(n, |i, j| {
        if target.covers(i, j) {
            0.90
        } else if distractors.iter().any(|d| d.covers(i, j)) {
            0.15
        } else {
            0.10 + 0.03 * pixel_noise(noise_seed ^ 0x7e57, i, j, 0)
        }
    })
}

/// Event surrogate: absolute temporal difference of RGB; zeros on frame 0.
fn event_map(rgb: &Tensor, prev: Option<&Tensor>) -> Tensor {
    match prev {
        None => Tensor::zeros(rgb.shape()),
        Some(p) => {
            let mut out = rgb.clone();
            for (o, &q) in out.data_mut().iter_mut().zip(p.data()) {
                *o = q32((*o - q).abs().clamp(0.0, 1.0));
            }
            out
        }
    }
}

/// Which tasks a generated dataset cycles through.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub length: usize,
    pub frame_size: usize,
    pub target_size: usize,
    pub distractors: usize,
    pub camouflage: bool,
    pub tasks: Vec<Task>,
    pub seed: u64,
}

/// Generates `sequences` sequences, cycling through `tasks` in order, with
/// per-sequence shape/color/velocity drawn from the master seed. Descriptors
/// are drawn up front, so generation parallelizes without changing output.
pub fn make_dataset(spec: &DatasetSpec) -> Vec<SyntheticSequence> {
    use rayon::prelude::*;

    assert!(!spec.tasks.is_empty(), "dataset needs at least one task");
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans: Vec<(GenDescriptor, u64)> = (0..spec.sequences)
        .map(|i| {
            let task = spec.tasks[i % spec.tasks.len()];
            let desc = GenDescriptor {
                task,
                frame_size: spec.frame_size,
                target_size: spec.target_size,
                shape: if master.gen_bool(0.5) {
                    TargetShape::Square
                } else {
                    TargetShape::Disc
                },
                color_index: master.gen_range(0..PALETTE.len()),
                velocity: (master.gen_range(-2.0..2.0), master.gen_range(-2.0..2.0)),
                distractors: spec.distractors,
                camouflage: spec.camouflage && task == Task::Rgbt,
            };
            (desc, master.gen())
        })
        .collect();
    plans
        .par_iter()
        .map(|(desc, seed)| generate(desc, *seed, spec.length))
        .collect()
}

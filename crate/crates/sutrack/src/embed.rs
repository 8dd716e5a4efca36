//! Tokenization of multi-modal frames.
//!
//! Every task is reduced to one shared token form: the RGB image and its
//! auxiliary image (depth, thermal or event surrogate) are concatenated into
//! six channels, cut into non-overlapping patches, and mapped linearly to
//! embedding vectors. Tasks without an auxiliary image duplicate the RGB
//! channels. Template tokens carry a box-driven foreground/background type
//! embedding, search tokens a search-type embedding, and an optional text
//! token carries the language description (a deterministic stub stands in
//! for a real text encoder).
//!
//! Functions here are value-level: they produce plain tensors that the model
//! feeds to its tape as constants or combines with parameters.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::PixelBox;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("rgb image must be H×W×3, got shape {0:?}")]
    BadRgbShape(Vec<usize>),
    #[error("aux image shape {aux:?} does not match rgb shape {rgb:?}")]
    AuxShapeMismatch { rgb: Vec<usize>, aux: Vec<usize> },
    #[error("task {task} requires an auxiliary image")]
    MissingAux { task: Task },
    #[error("task {task} requires a language description")]
    MissingLanguage { task: Task },
    #[error("pixel values must lie in [0,1], found {0}")]
    PixelOutOfRange(f64),
    #[error("image side {side} is not divisible by patch size {patch}")]
    NotDivisible { side: usize, patch: usize },
    #[error("template tokens need per-patch mask averages in soft/hard mode")]
    MissingMask,
    #[error("{tokens} tokens but {masks} mask averages")]
    MaskCountMismatch { tokens: usize, masks: usize },
}

/// Tracking task, named by the modalities it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rgb,
    Rgbd,
    Rgbt,
    Rgbe,
    Rgbl,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Rgb, Task::Rgbd, Task::Rgbt, Task::Rgbe, Task::Rgbl];

    /// Stable class index used by the task-recognition head.
    pub fn index(self) -> usize {
        match self {
            Task::Rgb => 0,
            Task::Rgbd => 1,
            Task::Rgbt => 2,
            Task::Rgbe => 3,
            Task::Rgbl => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Task> {
        Task::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Rgb => "rgb",
            Task::Rgbd => "rgbd",
            Task::Rgbt => "rgbt",
            Task::Rgbe => "rgbe",
            Task::Rgbl => "rgbl",
        }
    }

    pub fn from_name(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn needs_aux(self) -> bool {
        matches!(self, Task::Rgbd | Task::Rgbt | Task::Rgbe)
    }

    pub fn needs_language(self) -> bool {
        self == Task::Rgbl
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One frame of one task: RGB plus optional auxiliary image and language.
/// Images are H×W×3 with values in [0,1].
#[derive(Debug, Clone)]
pub struct ModalFrame {
    pub task: Task,
    pub rgb: Tensor,
    pub aux: Option<Tensor>,
    pub language: Option<String>,
}

impl ModalFrame {
    pub fn new(
        task: Task,
        rgb: Tensor,
        aux: Option<Tensor>,
        language: Option<String>,
    ) -> Result<Self, EmbedError> {
        if rgb.rank() != 3 || rgb.shape()[2] != 3 {
            return Err(EmbedError::BadRgbShape(rgb.shape().to_vec()));
        }
        if let Some(a) = &aux {
            if a.shape() != rgb.shape() {
                return Err(EmbedError::AuxShapeMismatch {
                    rgb: rgb.shape().to_vec(),
                    aux: a.shape().to_vec(),
                });
            }
        }
        if task.needs_aux() && aux.is_none() {
            return Err(EmbedError::MissingAux { task });
        }
        if task.needs_language() && language.is_none() {
            return Err(EmbedError::MissingLanguage { task });
        }
        for img in std::iter::once(&rgb).chain(aux.iter()) {
            for &v in img.data() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(EmbedError::PixelOutOfRange(v));
                }
            }
        }
        Ok(ModalFrame {
            task,
            rgb,
            aux,
            language,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }

    /// The string the text token encodes: the language description for
    /// language tracking, no string otherwise (callers fall back to the
    /// reserved padding sentence).
    pub fn text_source(&self) -> Option<&str> {
        if self.task == Task::Rgbl {
            self.language.as_deref()
        } else {
            None
        }
    }
}

/// Six-channel image: RGB in channels 0..3, auxiliary in 3..6. Tasks without
/// an auxiliary image duplicate RGB into channels 3..6.
pub fn concat_channels(frame: &ModalFrame) -> Tensor {
    let (h, w) = (frame.height(), frame.width());
    let aux = frame.aux.as_ref().unwrap_or(&frame.rgb);
    let mut data = Vec::with_capacity(h * w * 6);
    let r = frame.rgb.data();
    let a = aux.data();
    for px in 0..h * w {
        data.extend_from_slice(&r[px * 3..px * 3 + 3]);
        data.extend_from_slice(&a[px * 3..px * 3 + 3]);
    }
    Tensor::new(vec![h, w, 6], data)
}

/// Patch extraction for a six-channel image.
///
/// Patches are taken in row-major order over the patch grid. Each patch
/// flattens to a row of length 6P²: first its RGB half, then its auxiliary
/// half, each half in row-major pixel order with channels fastest. This
/// layout makes the two halves of the embedding weight matrix correspond to
/// the two source images, which [`init_from_rgb_weights`] relies on.
pub fn im2col6(img6: &Tensor, p: usize) -> Result<Tensor, EmbedError> {
    assert_eq!(img6.rank(), 3, "expected H×W×6 image");
    assert_eq!(img6.shape()[2], 6, "expected 6 channels, got {}", img6.shape()[2]);
    let (h, w) = (img6.shape()[0], img6.shape()[1]);
    for side in [h, w] {
        if side % p != 0 {
            return Err(EmbedError::NotDivisible { side, patch: p });
        }
    }
    let (gh, gw) = (h / p, w / p);
    let half = 3 * p * p;
    let mut out = Vec::with_capacity(gh * gw * 6 * p * p);
    let src = img6.data();
    for pr in 0..gh {
        for pc in 0..gw {
            let mut row = vec![0.0; 6 * p * p];
            for r in 0..p {
                for c in 0..p {
                    let px = (pr * p + r) * w + (pc * p + c);
                    let dst = (r * p + c) * 3;
                    for ch in 0..3 {
                        row[dst + ch] = src[px * 6 + ch];
                        row[half + dst + ch] = src[px * 6 + 3 + ch];
                    }
                }
            }
            out.extend_from_slice(&row);
        }
    }
    Ok(Tensor::new(vec![gh * gw, 6 * p * p], out))
}

/// Linear patch embedding: im2col rows mapped through `w` (D×6P²) plus `b`
/// (D). Value-level twin of the model's on-tape embedding; both compute
/// `X·Wᵀ + b` with identical operation order, so results match bitwise.
pub fn patch_embed(img6: &Tensor, w: &Tensor, b: &Tensor, p: usize) -> Result<Tensor, EmbedError> {
    let x = im2col6(img6, p)?;
    let n = x.shape()[0];
    let d = w.shape()[0];
    assert_eq!(
        w.shape()[1],
        6 * p * p,
        "embedding weight is {:?}, expected second dim {}",
        w.shape(),
        6 * p * p
    );
    let tokens = x.matmul(&w.transpose2());
    let bias = b.reshape(&[1, d]).broadcast_to(&[n, d]);
    Ok(tokens.add(&bias))
}

/// How the six-channel embedding weight is built from a three-channel one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Both halves get w3/2: duplicated-RGB input reproduces the
    /// three-channel embedder exactly.
    HalfCopy,
    /// Both halves get w3 unchanged; duplicated input doubles the pre-bias
    /// response.
    FullCopy,
    /// RGB half gets w3, auxiliary half gets a fresh small-uniform init
    /// (±0.02).
    SingleCopy,
}

/// Expands a D×(3P²) weight to D×(6P²) per [`InitMode`]. Column blocks
/// follow the [`im2col6`] layout: RGB half first, auxiliary half second.
pub fn init_from_rgb_weights<R: Rng>(w3: &Tensor, mode: InitMode, rng: &mut R) -> Tensor {
    assert_eq!(w3.rank(), 2, "expected a D×(3P²) weight, got {:?}", w3.shape());
    let (d, half) = (w3.shape()[0], w3.shape()[1]);
    let mut out = Vec::with_capacity(d * half * 2);
    for row in w3.data().chunks(half) {
        match mode {
            InitMode::HalfCopy => {
                out.extend(row.iter().map(|v| v / 2.0));
                out.extend(row.iter().map(|v| v / 2.0));
            }
            InitMode::FullCopy => {
                out.extend_from_slice(row);
                out.extend_from_slice(row);
            }
            InitMode::SingleCopy => {
                out.extend_from_slice(row);
                out.extend((0..half).map(|_| rng.gen_range(-0.02..0.02)));
            }
        }
    }
    Tensor::new(vec![d, 2 * half], out)
}

/// Binary mask of pixels inside a box. Pixel (row i, col j) counts as inside
/// when its center (j+0.5, i+0.5) falls in [x0,x1) × [y0,y1), so integer
/// boxes cover exactly width×height pixels.
pub fn box_mask(b: &PixelBox, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let cy = i as f64 + 0.5;
        for j in 0..w {
            let cx = j as f64 + 0.5;
            let inside = b.x0 <= cx && cx < b.x1 && b.y0 <= cy && cy < b.y1;
            data.push(f64::from(inside));
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Per-patch mean of a binary mask, row-major patch order.
pub fn soft_mask_avg(mask: &Tensor, p: usize) -> Result<Vec<f64>, EmbedError> {
    assert_eq!(mask.rank(), 2, "expected an H×W mask");
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    for side in [h, w] {
        if side % p != 0 {
            return Err(EmbedError::NotDivisible { side, patch: p });
        }
    }
    let (gh, gw) = (h / p, w / p);
    let src = mask.data();
    let mut out = Vec::with_capacity(gh * gw);
    for pr in 0..gh {
        for pc in 0..gw {
            let mut sum = 0.0;
            for r in 0..p {
                for c in 0..p {
                    sum += src[(pr * p + r) * w + (pc * p + c)];
                }
            }
            out.push(sum / (p * p) as f64);
        }
    }
    Ok(out)
}

/// Token-type assignment mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenTypeMode {
    /// No token-type embeddings at all.
    None,
    /// Foreground/background decided by rounding the patch mask average.
    Hard,
    /// Foreground/background blended by the patch mask average.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Template,
    Search,
}

/// Rounds a mask average for hard mode; the 0.5 tie goes to foreground.
pub fn hard_round(m: f64) -> f64 {
    f64::from(m >= 0.5)
}

/// Adds token-type embeddings to one image's tokens.
///
/// Template tokens get `m·e_fg + (1−m)·e_bg` per patch, where `m` is the
/// patch mask average (rounded in hard mode). Search tokens get `e_search`.
/// Mode `none` returns the tokens unchanged.
pub fn apply_token_type(
    tokens: &Tensor,
    m_avg: Option<&[f64]>,
    e_fg: &Tensor,
    e_bg: &Tensor,
    e_search: &Tensor,
    mode: TokenTypeMode,
    kind: SpanKind,
) -> Result<Tensor, EmbedError> {
    if mode == TokenTypeMode::None {
        return Ok(tokens.clone());
    }
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    match kind {
        SpanKind::Search => {
            let add = e_search.reshape(&[1, d]).broadcast_to(&[n, d]);
            Ok(tokens.add(&add))
        }
        SpanKind::Template => {
            let m_avg = m_avg.ok_or(EmbedError::MissingMask)?;
            if m_avg.len() != n {
                return Err(EmbedError::MaskCountMismatch {
                    tokens: n,
                    masks: m_avg.len(),
                });
            }
            let mut out = tokens.clone();
            for (row, &m_raw) in out.data_mut().chunks_mut(d).zip(m_avg) {
                let m = match mode {
                    TokenTypeMode::Hard => hard_round(m_raw),
                    _ => m_raw,
                };
                for ((v, fg), bg) in row.iter_mut().zip(e_fg.data()).zip(e_bg.data()) {
                    *v += m * fg + (1.0 - m) * bg;
                }
            }
            Ok(out)
        }
    }
}

/// Reserved sentence encoded when a frame has no language description.
pub const PAD_SENTENCE: &str = "<pad> <pad> <pad> <pad>";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic stand-in for a text encoder: the string seeds a fixed
/// pseudo-random unit-norm vector (shape 1×D). Absent language encodes
/// [`PAD_SENTENCE`]. The model applies its learned D×D projection on top.
pub fn text_stub_vector(language: Option<&str>, d: usize) -> Tensor {
    let text = language.unwrap_or(PAD_SENTENCE);
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.as_bytes()));
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0, "degenerate text stub vector");
    for x in &mut v {
        *x /= norm;
    }
    Tensor::new(vec![1, d], v)
}

/// How the text token joins the image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Appended as one extra sequence token (the default).
    Concat,
    /// Added onto every image token; no text span in the sequence.
    Add,
    /// Multiplied into every image token; no text span in the sequence.
    Mul,
}

/// Whether the six-channel embedding is one unified embedder or two separate
/// three-channel embedders whose token grids concatenate spatially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    Unified,
    Separate,
}

/// Token index ranges of one assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanSet {
    pub static_template: Range<usize>,
    pub dynamic_template: Range<usize>,
    pub search: Range<usize>,
    pub text: Option<usize>,
    /// Extra learned task token (task-token pooling variant only).
    pub task: Option<usize>,
    pub total: usize,
}

/// Computes spans for `n_templates` template images (1 or 2) of
/// `tokens_per_template` tokens each, a search image, an optional text token
/// and an optional trailing task token. With one template the dynamic span
/// is empty.
pub fn sequence_spans(
    tokens_per_template: usize,
    search_tokens: usize,
    n_templates: usize,
    has_text_token: bool,
    has_task_token: bool,
) -> SpanSet {
    assert!(
        n_templates == 1 || n_templates == 2,
        "expected 1 or 2 templates, got {n_templates}"
    );
    let t = tokens_per_template;
    let static_template = 0..t;
    let dynamic_template = if n_templates == 2 { t..2 * t } else { t..t };
    let search_start = dynamic_template.end;
    let search = search_start..search_start + search_tokens;
    let mut next = search.end;
    let text = has_text_token.then(|| {
        let i = next;
        next += 1;
        i
    });
    let task = has_task_token.then(|| {
        let i = next;
        next += 1;
        i
    });
    SpanSet {
        static_template,
        dynamic_template,
        search,
        text,
        task,
        total: next,
    }
}

//! C ABI for the tracker: opaque handle, status codes, and a thread-local
//! last-error message. See `include/sutrack.h` for the generated header.
//!
//! Every function catches panics and turns them into `Internal`; no Rust
//! unwinding crosses the boundary. Frames are tightly packed row-major HWC
//! f32 in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sutrack::checkpoint;
use sutrack::config::RunConfig;
use sutrack::embed::{ModalFrame, Task};
use sutrack::geom::PixelBox;
use sutrack::model::Model;
use sutrack::tensor::Tensor;
use sutrack::tracker::{decode, effective_window, TrackerState};

/// Call outcome; every API function returns one.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SutrackStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were present but invalid (shape, range, JSON, task).
    InvalidArgument = 2,
    /// The checkpoint could not be read or did not match the config.
    BadCheckpoint = 3,
    /// Operation called out of order (e.g. step before init).
    BadState = 4,
    /// Unexpected internal failure; details via sutrack_last_error.
    Internal = 5,
}

/// Axis-aligned box in frame pixels, corners (x0,y0) top-left inclusive.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SutrackBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Task labels matching the five training domains.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SutrackTask {
    Rgb = 0,
    Rgbd = 1,
    Rgbt = 2,
    Rgbe = 3,
    Rgbl = 4,
}

/// One input frame. `rgb` points at width*height*3 floats (row-major, HWC).
/// `aux` is null for RGB/RGBL tasks and another width*height*3 buffer
/// otherwise. `language` is an optional UTF-8 description (RGBL only).
#[repr(C)]
pub struct SutrackFrame {
    pub width: u32,
    pub height: u32,
    pub rgb: *const f32,
    pub aux: *const f32,
    pub task: SutrackTask,
    pub language: *const c_char,
}

/// Opaque tracker handle.
pub struct SutrackTracker {
    model: Model,
    cfg: RunConfig,
    window: Tensor,
    state: Option<TrackerState>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: SutrackStatus, msg: impl Into<String>) -> SutrackStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> SutrackStatus) -> SutrackStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(SutrackStatus::Internal, format!("internal panic: {msg}"))
        }
    }
}

impl From<SutrackTask> for Task {
    fn from(t: SutrackTask) -> Task {
        match t {
            SutrackTask::Rgb => Task::Rgb,
            SutrackTask::Rgbd => Task::Rgbd,
            SutrackTask::Rgbt => Task::Rgbt,
            SutrackTask::Rgbe => Task::Rgbe,
            SutrackTask::Rgbl => Task::Rgbl,
        }
    }
}

impl From<&PixelBox> for SutrackBox {
    fn from(b: &PixelBox) -> SutrackBox {
        SutrackBox {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        }
    }
}

unsafe fn image_tensor(ptr: *const f32, h: usize, w: usize) -> Tensor {
    let data = std::slice::from_raw_parts(ptr, h * w * 3);
    Tensor::new(vec![h, w, 3], data.iter().map(|&v| v as f64).collect())
}

unsafe fn convert_frame(frame: *const SutrackFrame) -> Result<ModalFrame, String> {
    let f = frame.as_ref().ok_or("frame is null")?;
    if f.rgb.is_null() {
        return Err("frame.rgb is null".to_string());
    }
    let (h, w) = (f.height as usize, f.width as usize);
    if h == 0 || w == 0 {
        return Err(format!("frame is {}x{}", f.height, f.width));
    }
    let task: Task = f.task.into();
    let rgb = image_tensor(f.rgb, h, w);
    let aux = if f.aux.is_null() {
        None
    } else {
        Some(image_tensor(f.aux, h, w))
    };
    let language = if f.language.is_null() {
        None
    } else {
        Some(
            CStr::from_ptr(f.language)
                .to_str()
                .map_err(|_| "frame.language is not UTF-8")?
                .to_string(),
        )
    };
    ModalFrame::new(task, rgb, aux, language).map_err(|e| e.to_string())
}

fn pixel_box(b: &SutrackBox) -> PixelBox {
    PixelBox::new(b.x0, b.y0, b.x1, b.y1)
}

/// Copies the last error message (UTF-8, not null-terminated unless space
/// allows) into `buf` and returns its full length in bytes. A zero return
/// means no error has been recorded on this thread.
#[no_mangle]
pub unsafe extern "C" fn sutrack_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn sutrack_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a tracker from a checkpoint and an optional JSON config (null for
/// defaults). The config must describe the checkpoint's architecture. On
/// success `*out` owns the tracker; release it with sutrack_tracker_free.
///
/// # Safety
/// `ckpt_path` must be a valid null-terminated string; `config_json` null or
/// the same; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sutrack_tracker_create(
    ckpt_path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut SutrackTracker,
) -> SutrackStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SutrackStatus::NullArgument, "out is null");
        }
        let Some(path) = ckpt_path.as_ref() else {
            return fail(SutrackStatus::NullArgument, "ckpt_path is null");
        };
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => return fail(SutrackStatus::InvalidArgument, "ckpt_path is not UTF-8"),
        };
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            let text = match CStr::from_ptr(config_json).to_str() {
                Ok(s) => s,
                Err(_) => {
                    return fail(SutrackStatus::InvalidArgument, "config_json is not UTF-8")
                }
            };
            match serde_json::from_str(text) {
                Ok(c) => c,
                Err(e) => return fail(SutrackStatus::InvalidArgument, format!("config: {e}")),
            }
        };
        let mut model = match Model::new(cfg.model_config(), cfg.seed) {
            Ok(m) => m,
            Err(e) => return fail(SutrackStatus::InvalidArgument, e.to_string()),
        };
        if let Err(e) = checkpoint::load_into(Path::new(path), &mut model.params) {
            return fail(SutrackStatus::BadCheckpoint, e.to_string());
        }
        let window = match effective_window(model.config().search_grid(), cfg.window_weight) {
            Ok(w) => w,
            Err(e) => return fail(SutrackStatus::InvalidArgument, e.to_string()),
        };
        let tracker = Box::new(SutrackTracker {
            model,
            cfg,
            window,
            state: None,
        });
        *out = Box::into_raw(tracker);
        SutrackStatus::Ok
    })
}

/// Initializes tracking from the first frame and its target box. May be
/// called again to restart on a new sequence.
///
/// # Safety
/// `tracker` must come from sutrack_tracker_create; `frame` must point at a
/// valid frame whose buffers match its stated size.
#[no_mangle]
pub unsafe extern "C" fn sutrack_tracker_init(
    tracker: *mut SutrackTracker,
    frame: *const SutrackFrame,
    target: SutrackBox,
) -> SutrackStatus {
    guarded(|| {
        let Some(t) = tracker.as_mut() else {
            return fail(SutrackStatus::NullArgument, "tracker is null");
        };
        let modal = match convert_frame(frame) {
            Ok(m) => m,
            Err(e) => return fail(SutrackStatus::InvalidArgument, e),
        };
        match TrackerState::init(&modal, pixel_box(&target), &t.cfg.tracker_config()) {
            Ok(state) => {
                t.state = Some(state);
                SutrackStatus::Ok
            }
            Err(e) => fail(SutrackStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Tracks the target into the next frame, writing the predicted box and its
/// confidence. Requires a prior successful init.
///
/// # Safety
/// Pointer requirements as in sutrack_tracker_init; `out_box` and
/// `out_confidence` must be valid or null (null skips that output).
#[no_mangle]
pub unsafe extern "C" fn sutrack_tracker_step(
    tracker: *mut SutrackTracker,
    frame: *const SutrackFrame,
    out_box: *mut SutrackBox,
    out_confidence: *mut f64,
) -> SutrackStatus {
    guarded(|| {
        let Some(t) = tracker.as_mut() else {
            return fail(SutrackStatus::NullArgument, "tracker is null");
        };
        let modal = match convert_frame(frame) {
            Ok(m) => m,
            Err(e) => return fail(SutrackStatus::InvalidArgument, e),
        };
        let tcfg = t.cfg.tracker_config();
        let Some(state) = t.state.as_mut() else {
            return fail(SutrackStatus::BadState, "step before init");
        };
        let mut run = || -> Result<(PixelBox, f64), String> {
            let sc = state.search_crop(&modal, &tcfg).map_err(|e| e.to_string())?;
            let (maps, _) = t
                .model
                .forward_maps(
                    [state.static_template(), state.dynamic_template()],
                    &sc.frame,
                )
                .map_err(|e| e.to_string())?;
            let (bx, conf) = decode(&maps, &sc.transform, &t.window).map_err(|e| e.to_string())?;
            let bx = bx.clamp_to(modal.width(), modal.height());
            let bx = if bx.width() > 0.0 && bx.height() > 0.0 {
                bx
            } else {
                state.last_box
            };
            state
                .advance(&modal, bx, conf, &tcfg)
                .map_err(|e| e.to_string())?;
            Ok((bx, conf))
        };
        match run() {
            Ok((bx, conf)) => {
                if let Some(slot) = out_box.as_mut() {
                    *slot = SutrackBox::from(&bx);
                }
                if let Some(slot) = out_confidence.as_mut() {
                    *slot = conf;
                }
                SutrackStatus::Ok
            }
            Err(e) => fail(SutrackStatus::Internal, e),
        }
    })
}

/// Releases a tracker. Null is a no-op.
///
/// # Safety
/// `tracker` must be null or a pointer from sutrack_tracker_create that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sutrack_tracker_free(tracker: *mut SutrackTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

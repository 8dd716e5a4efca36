//! On-disk sequence container.
//!
//! One directory per sequence:
//!
//! ```text
//! meta.json        task, length, height, width, language, integer boxes
//! f00000.rgb       frame 0 RGB image
//! f00000.aux       frame 0 auxiliary image (absent for tasks without one)
//! f00001.rgb       ...
//! ```
//!
//! Frame files: magic "SUTF", u32 H, u32 W, u32 C (little-endian), then
//! H·W·C f32 values, row-major with channels fastest. Values are stored as
//! f32; in-memory tensors hold f64, so writers must only hand in values that
//! are exactly representable in f32 (the generator quantizes at creation),
//! keeping write→read bitwise lossless.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, SyntheticSequence};
use crate::embed::{ModalFrame, Task};
use crate::geom::PixelBox;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SUTF";
const MAX_SIDE: u32 = 1 << 16;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeqMeta {
    task: String,
    length: usize,
    height: usize,
    width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    language: Option<String>,
    boxes: Vec<[i64; 4]>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_frame_file(path: &Path, img: &Tensor) -> Result<(), DataError> {
    assert_eq!(img.rank(), 3, "frame tensors are H×W×C");
    let mut buf = Vec::with_capacity(16 + img.numel() * 4);
    buf.extend_from_slice(MAGIC);
    for &d in img.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_frame_file(path: &Path) -> Result<Tensor, DataError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    let actual_len = f.metadata().map_err(|e| io_err(path, e))?.len();
    if actual_len < 16 {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected: 16,
            actual: actual_len,
        });
    }
    f.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[0..4] != MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found: [header[0], header[1], header[2], header[3]],
        });
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let c = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if h == 0 || w == 0 || c == 0 || h > MAX_SIDE || w > MAX_SIDE || c > 16 {
        return Err(DataError::BadShape {
            path: path.display().to_string(),
            h,
            w,
            c,
        });
    }
    let numel = h as u64 * w as u64 * c as u64;
    let expected = 16 + numel * 4;
    if actual_len != expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected,
            actual: actual_len,
        });
    }
    let mut bytes = vec![0u8; (numel * 4) as usize];
    f.read_exact(&mut bytes).map_err(|e| io_err(path, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![h as usize, w as usize, c as usize], data))
}

fn frame_path(dir: &Path, idx: usize, ext: &str) -> PathBuf {
    dir.join(format!("f{idx:05}.{ext}"))
}

pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let first = seq.frames.first().expect("sequence has no frames");
    let meta = SeqMeta {
        task: seq.task.name().to_string(),
        length: seq.len(),
        height: first.height(),
        width: first.width(),
        language: seq.language.clone(),
        boxes: seq
            .boxes
            .iter()
            .map(|b| [b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64])
            .collect(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&meta_path, json).map_err(|e| io_err(&meta_path, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_frame_file(&frame_path(dir, i, "rgb"), &frame.rgb)?;
        if let Some(aux) = &frame.aux {
            write_frame_file(&frame_path(dir, i, "aux"), aux)?;
        }
    }
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<SyntheticSequence, DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: SeqMeta = serde_json::from_str(&text).map_err(|e| DataError::BadMeta {
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    let task = Task::from_name(&meta.task).ok_or_else(|| DataError::BadMeta {
        path: meta_path.display().to_string(),
        message: format!("unknown task `{}`", meta.task),
    })?;
    if meta.boxes.len() != meta.length {
        return Err(DataError::BadMeta {
            path: meta_path.display().to_string(),
            message: format!("{} boxes for {} frames", meta.boxes.len(), meta.length),
        });
    }
    let mut frames = Vec::with_capacity(meta.length);
    for i in 0..meta.length {
        let rgb = read_frame_file(&frame_path(dir, i, "rgb"))?;
        let aux_path = frame_path(dir, i, "aux");
        let aux = if task.needs_aux() {
            Some(read_frame_file(&aux_path)?)
        } else {
            None
        };
        let frame = ModalFrame::new(task, rgb, aux, meta.language.clone()).map_err(|e| {
            DataError::BadMeta {
                path: dir.display().to_string(),
                message: format!("frame {i}: {e}"),
            }
        })?;
        if frame.height() != meta.height || frame.width() != meta.width {
            return Err(DataError::BadMeta {
                path: dir.display().to_string(),
                message: format!(
                    "frame {i} is {}×{}, metadata says {}×{}",
                    frame.height(),
                    frame.width(),
                    meta.height,
                    meta.width
                ),
            });
        }
        frames.push(frame);
    }
    let boxes = meta
        .boxes
        .iter()
        .map(|b| PixelBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64))
        .collect();
    Ok(SyntheticSequence {
        task,
        frames,
        boxes,
        language: meta.language,
    })
}

/// Writes every sequence as `seq_NNNN` under `dir`.
pub fn write_dataset(dir: &Path, seqs: &[SyntheticSequence]) -> Result<(), DataError> {
    for (i, seq) in seqs.iter().enumerate() {
        write_sequence(&dir.join(format!("seq_{i:04}")), seq)?;
    }
    Ok(())
}

/// Reads all `seq_*` directories under `dir`, sorted by name.
pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticSequence>, DataError> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    names.sort();
    names.iter().map(|p| read_sequence(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen::{generate, GenDescriptor, TargetShape};

    fn sample_seq(task: Task) -> SyntheticSequence {
        let desc = GenDescriptor {
            task,
            frame_size: 32,
            target_size: 8,
            shape: TargetShape::Square,
            color_index: 0,
            velocity: (1.5, -1.0),
            distractors: 1,
            camouflage: false,
        };
        generate(&desc, 99, 4)
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        for task in [Task::Rgb, Task::Rgbt, Task::Rgbl] {
            let seq = sample_seq(task);
            let path = dir.path().join(task.name());
            write_sequence(&path, &seq).unwrap();
            let back = read_sequence(&path).unwrap();
            assert_eq!(back.task, seq.task);
            assert_eq!(back.language, seq.language);
            assert_eq!(back.boxes.len(), seq.boxes.len());
            for (a, b) in back.boxes.iter().zip(&seq.boxes) {
                assert_eq!(a, b);
            }
            for (a, b) in back.frames.iter().zip(&seq.frames) {
                assert_eq!(a.rgb.data(), b.rgb.data());
                match (&a.aux, &b.aux) {
                    (Some(x), Some(y)) => assert_eq!(x.data(), y.data()),
                    (None, None) => {}
                    _ => panic!("aux presence changed in roundtrip"),
                }
            }
        }
    }

    #[test]
    fn rgb_task_writes_no_aux_files() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(Task::Rgb);
        write_sequence(dir.path(), &seq).unwrap();
        assert!(dir.path().join("f00000.rgb").exists());
        assert!(!dir.path().join("f00000.aux").exists());
    }

    #[test]
    fn truncated_frame_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.rgb");
        write_frame_file(&path, &Tensor::zeros(&[4, 4, 3])).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_frame_file(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("201") && msg.contains("208"), "got: {msg}");
    }

    #[test]
    fn bad_magic_names_path_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.rgb");
        fs::write(&path, b"JUNKxxxxxxxxxxxxxxxxxxxx").unwrap();
        let err = read_frame_file(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame.rgb") && msg.contains("offset 0"), "got: {msg}");
    }

    #[test]
    fn unknown_meta_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample_seq(Task::Rgb);
        write_sequence(dir.path(), &seq).unwrap();
        let meta_path = dir.path().join("meta.json");
        let mut text = fs::read_to_string(&meta_path).unwrap();
        text = text.replacen('{', "{\n  \"surprise\": 1,", 1);
        fs::write(&meta_path, text).unwrap();
        assert!(matches!(
            read_sequence(dir.path()),
            Err(DataError::BadMeta { .. })
        ));
    }

    #[test]
    fn dataset_roundtrip_preserves_order_and_count() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = vec![sample_seq(Task::Rgb), sample_seq(Task::Rgbt)];
        write_dataset(dir.path(), &seqs).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].task, Task::Rgb);
        assert_eq!(back[1].task, Task::Rgbt);
    }
}

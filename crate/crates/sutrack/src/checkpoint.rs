//! Binary checkpoint format for parameter sets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SUTK"
//! version u32      currently 1
//! count   u32      number of parameters
//! per parameter, in registration order:
//!   name_len u16, name bytes (UTF-8)
//!   rank     u8,  dims rank x u32
//!   data     numel x f64, row-major
//! ```
//!
//! Values are stored exactly (f64 bits), so save then load is bitwise lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::optim::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SUTK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing parameter `{name}`")]
    MissingParam { name: String },
    #[error("checkpoint has unknown parameter `{name}`")]
    UnknownParam { name: String },
    #[error("parameter `{name}` has shape {found:?} in checkpoint, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.value.rank() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint as (name, tensor) pairs in file order.
pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r, "parameter count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt(format!("parameter {i} name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "tensor data")?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing parameter set. The file must contain
/// exactly the set's parameter names, each with a matching shape.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<(), CheckpointError> {
    let entries = read(path)?;
    let mut seen = vec![false; params.len()];
    for (name, value) in entries {
        let Some(id) = params.id_of(&name) else {
            return Err(CheckpointError::UnknownParam { name });
        };
        let expected = params.value(id).shape().to_vec();
        if expected != value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: value.shape().to_vec(),
            });
        }
        seen[id] = true;
        params.set_value(id, value);
    }
    for (id, hit) in seen.iter().enumerate() {
        if !hit {
            return Err(CheckpointError::MissingParam {
                name: params.get(id).name.clone(),
            });
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Corrupt(format!("file ends inside {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16, CheckpointError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.register(
            "enc.w",
            ParamGroup::Encoder,
            Tensor::rand_uniform(&[3, 4], 1.0, &mut rng),
        );
        ps.register(
            "head.b",
            ParamGroup::Other,
            Tensor::rand_uniform(&[5], 0.5, &mut rng),
        );
        ps
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sutk");
        let src = sample_params();
        save(&path, &src).unwrap();
        let mut dst = sample_params();
        for (id, _) in sample_params().iter() {
            let zero = Tensor::zeros(src.value(id).shape());
            dst.set_value(id, zero);
        }
        load_into(&path, &mut dst).unwrap();
        for (id, p) in src.iter() {
            assert_eq!(p.value.data(), dst.value(id).data());
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sutk");
        save(&path, &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 11]).unwrap();
        let err = read(&cut).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(_)));
    }

    #[test]
    fn bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(read(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn shape_mismatch_names_parameter_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sutk");
        save(&path, &sample_params()).unwrap();
        let mut other = ParamSet::new();
        other.register("enc.w", ParamGroup::Encoder, Tensor::zeros(&[4, 3]));
        other.register("head.b", ParamGroup::Other, Tensor::zeros(&[5]));
        let err = load_into(&path, &mut other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc.w") && msg.contains("[4, 3]") && msg.contains("[3, 4]"));
    }

    #[test]
    fn missing_and_unknown_params_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sutk");
        save(&path, &sample_params()).unwrap();

        let mut superset = sample_params();
        superset.register("extra", ParamGroup::Other, Tensor::zeros(&[1]));
        assert!(matches!(
            load_into(&path, &mut superset),
            Err(CheckpointError::MissingParam { .. })
        ));

        let mut subset = ParamSet::new();
        subset.register("enc.w", ParamGroup::Encoder, Tensor::zeros(&[3, 4]));
        assert!(matches!(
            load_into(&path, &mut subset),
            Err(CheckpointError::UnknownParam { .. })
        ));
    }
}

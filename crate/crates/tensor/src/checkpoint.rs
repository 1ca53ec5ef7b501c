//! Named-parameter checkpoint files.
//!
//! Layout: magic "SPNW", version u32 LE, entry count u32 LE, then per
//! entry: name length u16 LE, UTF-8 name bytes, rank u8, dims u32 LE each,
//! values f32 LE row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPNW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    entries: &[(String, Tensor<f32>)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "parameter name too long");
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        assert!(shape.len() <= u8::MAX as usize);
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r, "entry count")? as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::InvalidName)?;

        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "values")?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::new(&shape, data)
            .expect("shape/data length consistent by construction");
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Check a loaded checkpoint against the parameter names and shapes a model
/// expects, in order. Extra, missing, or reshaped entries are all rejected.
pub fn validate_against(
    entries: &[(String, Tensor<f32>)],
    expected: &[(String, Vec<usize>)],
) -> Result<(), CheckpointError> {
    use std::collections::HashMap;
    let mut by_name: HashMap<&str, &Tensor<f32>> = HashMap::new();
    for (name, tensor) in entries {
        by_name.insert(name.as_str(), tensor);
    }
    for (name, shape) in expected {
        match by_name.remove(name.as_str()) {
            None => return Err(CheckpointError::MissingParam(name.clone())),
            Some(tensor) => {
                if tensor.shape() != shape.as_slice() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: tensor.shape().to_vec(),
                    });
                }
            }
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(CheckpointError::UnexpectedParam((*extra).to_string()));
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(what.to_string())
        } else {
            CheckpointError::Io(e)
        }
    })
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

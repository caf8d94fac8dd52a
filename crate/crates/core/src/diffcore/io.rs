//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//! magic `b"DSRT"`, version `u8 = 1`, dtype tag `u8` (0 = f32, 1 = f64),
//! rank `u8`, then rank extents as `u32`, then the raw element data in
//! row-major order.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::{Dtype, DsrError, Real, Result};

use super::Tensor;

const MAGIC: &[u8; 4] = b"DSRT";
const VERSION: u8 = 1;

/// Serialize `tensor` to `path`; the stored dtype is the element type's.
pub fn write_tensor<T: Real>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(DsrError::Format(format!("rank {rank} exceeds format limit")));
    }
    let mut buf = Vec::with_capacity(7 + 4 * rank + tensor.len() * T::DTYPE.width());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE.tag());
    buf.push(rank as u8);
    for &extent in tensor.shape() {
        if extent > u32::MAX as usize {
            return Err(DsrError::Format(format!("extent {extent} exceeds format limit")));
        }
        buf.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| DsrError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    file.write_all(&buf)?;
    Ok(())
}

/// Deserialize a tensor, converting the stored dtype to `T` if they differ
/// (f32 -> f64 is exact; f64 -> f32 rounds).
pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DsrError::MissingArtifact(format!("tensor file {}", path.display()))
        } else {
            DsrError::Io(e)
        }
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_tensor(&bytes).map_err(|msg| DsrError::Format(format!("{}: {msg}", path.display())))
}

fn parse_tensor<T: Real>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    if bytes.len() < 7 {
        return Err("file shorter than header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic (not a DSRT tensor file)".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let dtype = Dtype::from_tag(bytes[5]).ok_or_else(|| format!("unknown dtype tag {}", bytes[5]))?;
    let rank = bytes[6] as usize;
    let header_len = 7 + 4 * rank;
    if bytes.len() < header_len {
        return Err("truncated extents".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let extent = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape.push(extent as usize);
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != count * dtype.width() {
        return Err(format!(
            "payload is {} bytes, shape {:?} at {:?} needs {}",
            payload.len(),
            shape,
            dtype,
            count * dtype.width()
        ));
    }
    let data: Vec<T> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c).to_f64()))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

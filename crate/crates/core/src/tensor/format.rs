//! Binary tensor file format used by the CLI and checkpoints.
//!
//! Layout: magic `MVST` (4 bytes), format version `u8 = 1`, dtype code `u8`
//! (1 = f32, 2 = f64), `ndim: u8`, then `ndim` little-endian `u64` extents,
//! then the row-major little-endian payload. Readers reject wrong magic,
//! unknown versions, and payload-length mismatches.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MVST";
pub const VERSION: u8 = 1;

/// A tensor read back with whichever precision the file declared.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }

    /// Converts into the requested element type (exact for f32 -> f64).
    pub fn cast<E: Element>(&self) -> Tensor<E> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 1 + 8 * t.rank() + t.numel() * E::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(E::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < 7 {
        return Err(Error::Validation(
            "tensor file truncated before header".into(),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Validation(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            MAGIC
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Validation(format!(
            "unsupported format version {}, expected {VERSION}",
            bytes[4]
        )));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    let header = 7 + ndim * 8;
    if bytes.len() < header {
        return Err(Error::Validation(
            "tensor file truncated inside shape".into(),
        ));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 7 + i * 8;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    let expected = numel * dtype.size_bytes();
    if payload.len() != expected {
        return Err(Error::Validation(format!(
            "payload length mismatch: {} bytes, expected {} for shape {:?} ({})",
            payload.len(),
            expected,
            shape,
            dtype
        )));
    }
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload.chunks(4).map(f32::read_le).collect();
            Ok(DynTensor::F32(Tensor::new(shape, data)?))
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload.chunks(8).map(f64::read_le).collect();
            Ok(DynTensor::F64(Tensor::new(shape, data)?))
        }
    }
}

pub fn write_file<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut file =
        fs::File::create(path).map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?;
    file.write_all(&encode(t))
        .map_err(|e| Error::Io(format!("write {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<DynTensor> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

//! Single-tensor file format.
//!
//! ```text
//! MSTF1\n
//! {"dtype":"f64","shape":[2,3],"name":"x"}\n
//! <little-endian row-major payload>
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"MSTF1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    I64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub name: String,
}

impl Header {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn write_header(w: &mut impl Write, header: &Header) -> Result<()> {
    w.write_all(MAGIC)?;
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Writes `t` with the given storage type. `I64` rounds toward zero.
pub fn write_tensor_as(w: &mut impl Write, name: &str, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_header(w, &Header { dtype, shape: t.shape().to_vec(), name: name.to_string() })?;
    let mut buf = Vec::with_capacity(t.numel() * dtype.size());
    for &v in t.data() {
        match dtype {
            Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::I64 => buf.extend_from_slice(&(v as i64).to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_tensor_as(w, name, t, Dtype::F64)
}

pub fn write_labels(w: &mut impl Write, name: &str, labels: &[usize]) -> Result<()> {
    write_header(w, &Header { dtype: Dtype::I64, shape: vec![labels.len()], name: name.to_string() })?;
    let mut buf = Vec::with_capacity(labels.len() * 8);
    for &l in labels {
        buf.extend_from_slice(&(l as i64).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads the whole of `r`; every byte must belong to the tensor.
fn read_raw(r: &mut impl Read) -> Result<(Header, Vec<u8>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSTF1\""));
    }
    let start = MAGIC.len();
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::format(start as u64, "unterminated header line"))?;
    let header: Header = serde_json::from_slice(&bytes[start..end])
        .map_err(|e| Error::format(start as u64, format!("bad header: {e}")))?;
    if header.shape.contains(&0) {
        return Err(Error::format(start as u64, format!("shape {:?} has a zero extent", header.shape)));
    }
    let payload_start = end + 1;
    let expected = header.numel() * header.dtype.size();
    let actual = bytes.len() - payload_start;
    if actual < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {actual} of {expected} bytes"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            (payload_start + expected) as u64,
            format!("payload has {} trailing bytes for shape {:?}", actual - expected, header.shape),
        ));
    }
    bytes.drain(..payload_start);
    Ok((header, bytes))
}

/// Reads any dtype, widening to `f64`.
pub fn read_tensor(r: &mut impl Read) -> Result<(Header, Tensor)> {
    let (header, bytes) = read_raw(r)?;
    let values: Vec<f64> = match header.dtype {
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::I64 => bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    let t = Tensor::new(header.shape.clone(), values)?;
    Ok((header, t))
}

pub fn read_labels(r: &mut impl Read) -> Result<(Header, Vec<usize>)> {
    let (header, bytes) = read_raw(r)?;
    if header.dtype != Dtype::I64 || header.shape.len() != 1 {
        return Err(Error::format(MAGIC.len() as u64, "labels must be a rank-1 i64 tensor"));
    }
    let mut out = Vec::with_capacity(header.numel());
    for (i, c) in bytes.chunks_exact(8).enumerate() {
        let v = i64::from_le_bytes(c.try_into().unwrap());
        if v < 0 {
            return Err(Error::Validation(format!("negative label {v} at index {i}")));
        }
        out.push(v as usize);
    }
    Ok((header, out))
}

pub fn save_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, name, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(Header, Tensor)> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn save_labels(path: &Path, name: &str, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(&mut w, name, labels)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<(Header, Vec<usize>)> {
    read_labels(&mut BufReader::new(File::open(path)?))
}

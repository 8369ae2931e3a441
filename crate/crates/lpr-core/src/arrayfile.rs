//! `.lpt` tensor files: a fixed little-endian header (magic, version, dtype,
//! dims) followed by row-major data. Corpus tensors are stored as `f32`,
//! checkpoint parameters as `f64` so reloads are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LPTENSOR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

fn write_header<W: Write>(w: &mut W, dtype: Dtype, shape: &[usize]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dtype as u32).to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad tensor file magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor file version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let dtype = match u32::from_le_bytes(u32buf) {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    r.read_exact(&mut u32buf)?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut u64buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    Ok((dtype, shape))
}

pub fn write_f32(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_f32_to(&mut w, array)
}

pub fn write_f32_to<W: Write>(w: &mut W, array: &ArrayD<f32>) -> Result<()> {
    write_header(w, Dtype::F32, array.shape())?;
    for v in array.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f64(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_f64_to(&mut w, array)
}

pub fn write_f64_to<W: Write>(w: &mut W, array: &ArrayD<f64>) -> Result<()> {
    write_header(w, Dtype::F64, array.shape())?;
    for v in array.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<ArrayD<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_f32_from(&mut r)
}

pub fn read_f32_from<R: Read>(r: &mut R) -> Result<ArrayD<f32>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != Dtype::F32 {
        return Err(Error::Format("expected f32 tensor".into()));
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 4];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Format(format!("tensor shape mismatch: {e}")))
}

pub fn read_f64_from<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != Dtype::F64 {
        return Err(Error::Format("expected f64 tensor".into()));
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Format(format!("tensor shape mismatch: {e}")))
}

pub fn read_f64(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    read_f64_from(&mut r)
}

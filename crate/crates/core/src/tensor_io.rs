//! Raw tensor file format: a small self-describing little-endian container
//! used for per-video frame/attention tensors, debug dumps and prediction
//! series.
//!
//! Layout: magic `CAPTENS1` (8 bytes) · dtype tag u8 (0 = f32, 1 = f64) ·
//! ndim u8 · ndim × u32 dims · payload in row-major order, little-endian.

use crate::{CapError, Result};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CAPTENS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

pub fn write_tensor(path: &Path, data: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&[match dtype {
        Dtype::F32 => 0u8,
        Dtype::F64 => 1u8,
    }])?;
    let shape = data.shape();
    f.write_all(&[shape.len() as u8])?;
    for &d in shape {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for v in data.iter() {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for v in data.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CapError::BadInput(format!(
            "{}: not a raw tensor file",
            path.display()
        )));
    }
    let mut head = [0u8; 2];
    f.read_exact(&mut head)?;
    let dtype = match head[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => {
            return Err(CapError::BadInput(format!("unknown dtype tag {other}")));
        }
    };
    let ndim = head[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..n {
                f.read_exact(&mut b)?;
                out.push(f64::from(f32::from_le_bytes(b)));
            }
        }
        Dtype::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out)
        .map_err(|e| CapError::BadInput(e.to_string()))
}

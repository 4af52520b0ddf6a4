//! "CTNS" complex tensor files.
//!
//! Layout (little-endian): magic `b"CTNS"`, version `u32`, H `u32`, W `u32`,
//! dtype `u8` (0 = float32 pairs, 1 = float64 pairs), then H·W row-major
//! interleaved `(re, im)` pairs.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kspace::{ComplexImage, KSpace};

pub const MAGIC: &[u8; 4] = b"CTNS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Tensor {
    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Self {
        Self {
            height,
            width,
            data: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

impl From<&ComplexImage> for Tensor {
    fn from(img: &ComplexImage) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        }
    }
}

impl From<&KSpace> for Tensor {
    fn from(k: &KSpace) -> Self {
        Self {
            height: k.height(),
            width: k.width(),
            data: k.data().to_vec(),
        }
    }
}

impl TryFrom<Tensor> for ComplexImage {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        ComplexImage::new(t.height, t.width, t.data)
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let elem = match dtype {
        Dtype::F32 => 8,
        Dtype::F64 => 16,
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + elem * t.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.height as u32).to_le_bytes());
    buf.extend_from_slice(&(t.width as u32).to_le_bytes());
    buf.push(dtype as u8);
    for z in &t.data {
        match dtype {
            Dtype::F32 => {
                buf.extend_from_slice(&(z.re as f32).to_le_bytes());
                buf.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
            Dtype::F64 => {
                buf.extend_from_slice(&z.re.to_le_bytes());
                buf.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    buf
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let height = u32_at(8) as usize;
    let width = u32_at(12) as usize;
    let n = height * width;
    let body = &bytes[HEADER_LEN..];
    let data = match bytes[16] {
        0 => {
            if body.len() != n * 8 {
                return Err(format!("expected {} payload bytes, got {}", n * 8, body.len()));
            }
            body.chunks_exact(8)
                .map(|c| {
                    let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                    let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                    Complex64::new(re as f64, im as f64)
                })
                .collect()
        }
        1 => {
            if body.len() != n * 16 {
                return Err(format!("expected {} payload bytes, got {}", n * 16, body.len()));
            }
            body.chunks_exact(16)
                .map(|c| {
                    let re = f64::from_le_bytes(c[0..8].try_into().unwrap());
                    let im = f64::from_le_bytes(c[8..16].try_into().unwrap());
                    Complex64::new(re, im)
                })
                .collect()
        }
        other => return Err(format!("unknown dtype {other}")),
    };
    Ok(Tensor { height, width, data })
}

pub fn write(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode(t, dtype))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_to<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(&encode(t, dtype))?;
    Ok(())
}

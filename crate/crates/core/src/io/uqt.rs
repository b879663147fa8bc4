//! UQT binary tensor container.
//!
//! Layout, all little-endian:
//! ```text
//! magic  b"UQT1"
//! dtype  u8 (0 = f32, 1 = f64)
//! ndim   u8
//! dims   ndim × u32
//! data   product(dims) × dtype-sized floats, row-major
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"UQT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8, path: &Path) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::format(path, format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write_to(writer: &mut impl Write, tensor: &Tensor, dtype: Dtype) -> std::io::Result<()> {
    writer.write_all(MAGIC)?;
    writer.write_all(&[dtype.code(), tensor.rank() as u8])?;
    for &d in tensor.shape() {
        writer.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                writer.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, tensor, dtype).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_from(reader: &mut impl Read, path: &Path) -> Result<(Tensor, Dtype)> {
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let mut hdr = [0u8; 2];
    reader.read_exact(&mut hdr).map_err(|e| Error::io(path, e))?;
    let dtype = Dtype::from_code(hdr[0], path)?;
    let ndim = hdr[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let elem = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = vec![0u8; n * elem];
    reader
        .read_exact(&mut payload)
        .map_err(|e| Error::format(path, format!("payload shorter than {n} elements: {e}")))?;
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let tensor = Tensor::from_vec(&dims, data)?;
    tensor
        .assert_finite("uqt payload")
        .map_err(|_| Error::format(path, "non-finite values in payload".to_string()))?;
    Ok((tensor, dtype))
}

pub fn read(path: &Path) -> Result<(Tensor, Dtype)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let out = read_from(&mut r, path)?;
    // trailing garbage means the file is not what we wrote
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(out),
        Ok(_) => Err(Error::format(path, "trailing bytes after payload".to_string())),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Read and validate an expected shape in one step.
pub fn read_expect(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let (t, _) = read(path)?;
    if t.shape() != shape {
        return Err(Error::format(
            path,
            format!("expected shape {:?}, found {:?}", shape, t.shape()),
        ));
    }
    Ok(t)
}

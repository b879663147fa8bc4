//! 8-bit binary PGM (P5) export of H×W maps for visual inspection. Values
//! are min-max scaled to 0..255; a constant map renders as black.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub fn write(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "pgm map must be H×W",
            expected: vec![2],
            got: vec![map.rank()],
        });
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_to_full_byte_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let map = Tensor::from_vec(&[2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        write(&p, &map).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let px = &bytes[bytes.len() - 4..];
        assert_eq!(px, &[0, 64, 128, 255]);
    }

    #[test]
    fn constant_map_renders_black() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        write(&p, &Tensor::filled(&[1, 3], 0.7)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);
    }
}

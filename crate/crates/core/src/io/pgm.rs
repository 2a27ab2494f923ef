use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Writes `values` (row-major, `height × width`) as binary PGM, mapping the
/// value range linearly onto 0..=255. A constant image maps to 0.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!("{} values for a {width}×{height} image", values.len())));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path)?;
    let err = |offset: usize, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "header truncated"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(err(0, "not a binary PGM"));
    }
    let num = |i: usize| fields[i].1.parse::<usize>().map_err(|_| err(fields[i].0, "bad header number"));
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(err(fields[3].0, "only 8-bit PGM is supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != width * height {
        return Err(err(bytes.len(), "pixel payload has the wrong length"));
    }
    Ok(Pgm { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 3, 2, &[-1.0, 0.0, 1.0, 1.0, 0.0, -1.0]).unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.pixels, vec![0, 128, 255, 255, 128, 0]);
        assert!(write_pgm(&p, 2, 2, &[0.0]).is_err());
        std::fs::write(&p, b"P5\n2 2\n255\n\x01").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }
}

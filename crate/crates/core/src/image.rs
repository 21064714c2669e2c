//! Depth images and binary PGM (P5) I/O.
//!
//! Depth maps travel as 16-bit PGM in millimetres; masks as 8-bit PGM.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Depth in metres, row-major; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Image(format!("depth values must be finite and non-negative, got {v}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, depth_m: f32) -> Self {
        Self {
            width,
            height,
            data: vec![depth_m; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Depth at the pixel containing sub-pixel position `(u, v)`; `None` if
    /// outside the image.
    pub fn at(&self, u: f64, v: f64) -> Option<f32> {
        let (c, r) = (u.round(), v.round());
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some(self.get(c as usize, r as usize))
    }

    pub fn from_millimetres(width: usize, height: usize, mm: &[u16]) -> Result<Self> {
        Self::new(width, height, mm.iter().map(|&v| v as f32 / 1000.0).collect())
    }

    pub fn to_millimetres(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&d| (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect()
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let img = read_pgm(path)?;
        match img.pixels {
            Pixels::Wide(mm) => Self::from_millimetres(img.width, img.height, &mm),
            Pixels::Narrow(_) => Err(Error::Image("depth images must be 16-bit PGM".into())),
        }
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pgm16(path, self.width, self.height, &self.to_millimetres())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    Narrow(Vec<u8>),
    Wide(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Pixels,
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::Image(e.to_string()))? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip).map_err(|e| Error::Image(e.to_string()))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c as char);
    }
    if tok.is_empty() {
        return Err(Error::Image("truncated PGM header".into()));
    }
    Ok(tok)
}

fn header_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = header_token(r)?;
    tok.parse()
        .map_err(|_| Error::Image(format!("bad PGM {what}: {tok:?}")))
}

pub fn parse_pgm<R: Read>(source: R) -> Result<Pgm> {
    let mut r = BufReader::new(source);
    if header_token(&mut r)? != "P5" {
        return Err(Error::Image("only binary PGM (P5) is supported".into()));
    }
    let width = header_number(&mut r, "width")?;
    let height = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    let n = width * height;
    let pixels = if maxval < 256 {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| Error::Image(format!("PGM data: {e}")))?;
        Pixels::Narrow(buf)
    } else if maxval < 65536 {
        let mut buf = vec![0u8; 2 * n];
        r.read_exact(&mut buf).map_err(|e| Error::Image(format!("PGM data: {e}")))?;
        Pixels::Wide(buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect())
    } else {
        return Err(Error::Image(format!("PGM maxval {maxval} out of range")));
    };
    Ok(Pgm { width, height, pixels })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(file)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write!(w, "P5\n{width} {height}\n255\n")
        .and_then(|_| w.write_all(data))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write!(w, "P5\n{width} {height}\n65535\n")
        .and_then(|_| w.write_all(&bytes))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_roundtrip_in_millimetres() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let depth = DepthImage::new(3, 2, vec![0.0, 1.25, 2.0, 0.5, 65.535, 3.001]).unwrap();
        depth.save_pgm(&path).unwrap();
        assert_eq!(DepthImage::load_pgm(&path).unwrap(), depth);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend([7u8, 9]);
        let pgm = parse_pgm(bytes.as_slice()).unwrap();
        assert_eq!(pgm.pixels, Pixels::Narrow(vec![7, 9]));
    }

    #[test]
    fn rejects_ascii_and_truncated() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0".as_slice()).is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x01".as_slice()).is_err());
    }

    #[test]
    fn negative_depth_rejected() {
        assert!(DepthImage::new(1, 1, vec![-1.0]).is_err());
        assert!(DepthImage::new(2, 1, vec![1.0]).is_err());
    }
}

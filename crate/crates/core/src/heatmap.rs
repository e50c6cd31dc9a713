//! Image-gate grids as 8-bit binary graymaps (P5 PGM, maxval 255).

use std::path::{Path, PathBuf};

use crate::decompose::GateVector;
use crate::error::{Result, SsnError};
use crate::numerics::Scalar;

/// Per-patch gate values laid out row-major as `height` rows of `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Most nearly square `(width, height)` with `width >= height` covering `p`.
pub fn default_shape(p: usize) -> (usize, usize) {
    let mut h = (p as f64).sqrt() as usize;
    while h > 1 && p % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (p / h, h)
}

/// `floor(255 g + 0.5)` clamped to the byte range.
pub fn to_pixel(g: f64) -> u8 {
    (255.0 * g + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl GateGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != values.len() {
            return Err(SsnError::Argument(format!(
                "grid {width}x{height} does not hold {} gate values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SsnError::Argument(format!("gate value {v} outside [0, 1]")));
        }
        Ok(GateGrid {
            width,
            height,
            values,
        })
    }

    pub fn from_gate<T: Scalar>(gate: &GateVector<T>, shape: Option<(usize, usize)>) -> Result<Self> {
        let (w, h) = shape.unwrap_or_else(|| default_shape(gate.len()));
        Self::new(w, h, gate.values().iter().map(|v| v.to_f64().unwrap()).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pixels after nearest-neighbour upscaling by `scale`.
    pub fn pixels(&self, scale: usize) -> Vec<u8> {
        let (w, h) = (self.width * scale, self.height * scale);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                out.push(to_pixel(self.values[(y / scale) * self.width + x / scale]));
            }
        }
        out
    }

    pub fn encode_pgm(&self, scale: usize) -> Result<Vec<u8>> {
        if scale == 0 {
            return Err(SsnError::Argument("upscale factor must be at least 1".into()));
        }
        let mut out = format!("P5\n{} {}\n255\n", self.width * scale, self.height * scale).into_bytes();
        out.extend(self.pixels(scale));
        Ok(out)
    }

    /// Reads a P5 file back as gate values `pixel / 255`.
    pub fn decode_pgm(buf: &[u8]) -> Result<Self> {
        let (w, h, px) = decode_pgm(buf)?;
        Self::new(w, h, px.iter().map(|&p| p as f64 / 255.0).collect())
    }
}

/// Parses a binary graymap with maxval 255, allowing `#` comments.
pub fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| SsnError::Format {
        offset: 0,
        message: format!("PGM: {m}"),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data = &buf[(pos + 1).min(buf.len())..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Writes `<dir>/<query_id>_cr.pgm` and returns its path.
pub fn export_gate_grid<T: Scalar>(
    gate: &GateVector<T>,
    shape: Option<(usize, usize)>,
    scale: usize,
    dir: &Path,
    query_id: u64,
) -> Result<PathBuf> {
    let grid = GateGrid::from_gate(gate, shape)?;
    let path = dir.join(format!("{query_id}_cr.pgm"));
    std::fs::write(&path, grid.encode_pgm(scale)?).map_err(|e| SsnError::io(&path, e))?;
    Ok(path)
}

//! Grayscale raster input: binary PGM (P5) and the IDX image format used by
//! the MNIST distribution, plus conversion of a raster into a weighted
//! particle measure on the unit square.

use super::{EmpiricalMeasure, MeasureError};

/// Grayscale raster, intensities in `[0, 1]`, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, intensities: Vec<f64>) -> Result<Self, MeasureError> {
        if width == 0 || height == 0 || intensities.len() != width * height {
            return Err(MeasureError::Format(format!(
                "raster dimensions {width}x{height} do not match {} samples",
                intensities.len()
            )));
        }
        if intensities.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(MeasureError::Format("intensities must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, intensities })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.intensities[row * self.width + col]
    }
}

/// Parse a binary (P5) PGM with `maxval ≤ 255`.
pub fn read_pgm_raster(bytes: &[u8]) -> Result<Raster, MeasureError> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, MeasureError> {
        // Skip whitespace and '#' comments between tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(MeasureError::Format("unexpected end of PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P5" {
        return Err(MeasureError::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let parse_dim = |s: String| {
        s.parse::<usize>()
            .map_err(|_| MeasureError::Format(format!("bad PGM header number: {s}")))
    };
    let width = parse_dim(token()?)?;
    let height = parse_dim(token()?)?;
    let maxval = parse_dim(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(MeasureError::Format(format!("PGM maxval {maxval} unsupported (need 1..=255)")));
    }
    // Exactly one whitespace byte separates the header from the pixel block.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(MeasureError::Format("missing separator before PGM pixels".into()));
    }
    pos += 1;
    let need = width * height;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(MeasureError::Format(format!(
            "PGM pixel block truncated: need {need} bytes, have {}",
            data.len()
        )));
    }
    let intensities = data[..need].iter().map(|&b| b as f64 / maxval as f64).collect();
    Raster::new(width, height, intensities)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Number of images in an `idx3-ubyte` byte stream.
pub fn idx_image_count(bytes: &[u8]) -> Result<usize, MeasureError> {
    let (count, _, _) = idx_header(bytes)?;
    Ok(count)
}

fn idx_header(bytes: &[u8]) -> Result<(usize, usize, usize), MeasureError> {
    if bytes.len() < 16 {
        return Err(MeasureError::Format("IDX header truncated".into()));
    }
    let word = |k: usize| u32::from_be_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    let magic = word(0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(MeasureError::Format(format!(
            "bad IDX magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    Ok((word(1) as usize, word(2) as usize, word(3) as usize))
}

/// Extract image `index` from an `idx3-ubyte` byte stream (big-endian magic
/// `0x00000803`, then counts, then raw `rows × cols` bytes per image).
pub fn read_idx_raster(bytes: &[u8], index: usize) -> Result<Raster, MeasureError> {
    let (count, rows, cols) = idx_header(bytes)?;
    if index >= count {
        return Err(MeasureError::Format(format!(
            "IDX image index {index} out of range (file holds {count})"
        )));
    }
    let per = rows * cols;
    let start = 16 + index * per;
    let end = start + per;
    if bytes.len() < end {
        return Err(MeasureError::Format(format!(
            "IDX pixel block truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let intensities = bytes[start..end].iter().map(|&b| b as f64 / 255.0).collect();
    Raster::new(cols, rows, intensities)
}

/// One atom per pixel with intensity strictly above `threshold`, placed at
/// the pixel center inside the unit square (row 0 maps to the top, `b → 1`),
/// weighted proportionally to intensity.
pub fn image_to_measure(raster: &Raster, threshold: f64) -> Result<EmpiricalMeasure, MeasureError> {
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    for row in 0..raster.height {
        for col in 0..raster.width {
            let v = raster.at(row, col);
            if v > threshold {
                coords.push((col as f64 + 0.5) / raster.width as f64);
                coords.push(1.0 - (row as f64 + 0.5) / raster.height as f64);
                weights.push(v);
            }
        }
    }
    if weights.is_empty() {
        return Err(MeasureError::EmptyImage);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let sum: f64 = weights.iter().sum();
    let n = weights.len();
    weights[n - 1] += 1.0 - sum;
    EmpiricalMeasure::new(2, coords, weights)
}

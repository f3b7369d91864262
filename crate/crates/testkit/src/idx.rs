//! Raster fixtures: an `idx3-ubyte` writer, a binary PGM writer, and two
//! synthetic 28×28 digits drawn as seven-segment glyphs. Enough texture to
//! exercise image ingestion without shipping binary assets.

use std::io;
use std::path::Path;

pub const DIGIT_ROWS: usize = 28;
pub const DIGIT_COLS: usize = 28;

/// Serialize images (each `rows·cols` bytes, row-major, top row first) in
/// the MNIST image layout: big-endian magic 0x00000803, count, rows, cols,
/// then raw pixels.
pub fn idx_image_bytes(images: &[&[u8]], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size does not match rows×cols");
        out.extend_from_slice(img);
    }
    out
}

pub fn write_idx_images(
    path: &Path,
    images: &[&[u8]],
    rows: usize,
    cols: usize,
) -> io::Result<()> {
    std::fs::write(path, idx_image_bytes(images, rows, cols))
}

/// Serialize a grayscale image as binary PGM (P5, maxval 255).
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Seven-segment cells on the 28×28 canvas, named as on an LED display.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Top,
    TopRight,
    BottomRight,
    Bottom,
    BottomLeft,
    TopLeft,
    Middle,
}

fn fill(img: &mut [u8], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
    for r in rows {
        for c in cols.clone() {
            img[r * DIGIT_COLS + c] = 255;
        }
    }
}

fn glyph(segments: &[Segment]) -> Vec<u8> {
    let mut img = vec![0u8; DIGIT_ROWS * DIGIT_COLS];
    for seg in segments {
        match seg {
            Segment::Top => fill(&mut img, 4..7, 7..21),
            Segment::TopRight => fill(&mut img, 4..16, 18..21),
            Segment::BottomRight => fill(&mut img, 13..25, 18..21),
            Segment::Bottom => fill(&mut img, 22..25, 7..21),
            Segment::BottomLeft => fill(&mut img, 13..25, 7..10),
            Segment::TopLeft => fill(&mut img, 4..16, 7..10),
            Segment::Middle => fill(&mut img, 13..16, 7..21),
        }
    }
    img
}

/// Synthetic "3": top, both right verticals, middle, bottom.
pub fn digit_three() -> Vec<u8> {
    glyph(&[
        Segment::Top,
        Segment::TopRight,
        Segment::BottomRight,
        Segment::Middle,
        Segment::Bottom,
    ])
}

/// Synthetic "6": everything except the top-right vertical.
pub fn digit_six() -> Vec<u8> {
    glyph(&[
        Segment::Top,
        Segment::TopLeft,
        Segment::BottomLeft,
        Segment::Middle,
        Segment::BottomRight,
        Segment::Bottom,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_layout_has_magic_and_payload() {
        let three = digit_three();
        let six = digit_six();
        let bytes = idx_image_bytes(&[&three, &six], DIGIT_ROWS, DIGIT_COLS);
        assert_eq!(&bytes[0..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &2u32.to_be_bytes());
        assert_eq!(bytes.len(), 16 + 2 * DIGIT_ROWS * DIGIT_COLS);
    }

    #[test]
    fn digits_are_plausible_binary_glyphs() {
        for img in [digit_three(), digit_six()] {
            assert!(img.iter().all(|&p| p == 0 || p == 255));
            let lit = img.iter().filter(|&&p| p > 0).count();
            assert!((100..400).contains(&lit), "{lit} lit pixels");
        }
        assert_ne!(digit_three(), digit_six());
    }

    #[test]
    fn six_is_heavier_on_the_left() {
        let mass_col = |img: &[u8]| -> f64 {
            let (mut num, mut den) = (0.0, 0.0);
            for r in 0..DIGIT_ROWS {
                for c in 0..DIGIT_COLS {
                    let v = img[r * DIGIT_COLS + c] as f64;
                    num += v * c as f64;
                    den += v;
                }
            }
            num / den
        };
        assert!(mass_col(&digit_six()) < mass_col(&digit_three()));
    }

    #[test]
    fn pgm_header_matches_payload() {
        let bytes = pgm_bytes(3, 2, &[0, 1, 2, 3, 4, 5]);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}

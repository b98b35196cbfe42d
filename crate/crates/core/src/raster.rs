//! RGB rasters and binary masks.
//!
//! Pixel intensities live in the unit interval but are always constructed
//! from 8-bit channel values, so a raster survives a PPM round trip exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `height × width × 3` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    /// Builds a raster from interleaved 8-bit RGB values.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} bytes for a {height}x{width} RGB raster, got {}",
                height * width * 3,
                bytes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    /// Builds a raster from raw unit-interval values. Used for synthetic
    /// inputs in tests and gradient checks.
    pub fn from_values(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} values for a {height}x{width} RGB raster, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_background(&self, row: usize, col: usize) -> bool {
        self.pixel(row, col) == [0.0; 3]
    }

    /// Quantizes to interleaved 8-bit RGB, clamping to the unit interval.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    /// Copies the `a × b` patch whose top-left corner is `(row, col)`.
    pub fn patch(&self, row: usize, col: usize, a: usize, b: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(a * b * 3);
        for r in row..row + a {
            let start = (r * self.width + col) * 3;
            out.extend_from_slice(&self.data[start..start + b * 3]);
        }
        out
    }

    /// A copy of this raster with every pixel enlarged to `factor × factor`.
    pub fn upscale(&self, factor: usize) -> Raster {
        let mut out = Raster::zeros(self.height * factor, self.width * factor);
        for r in 0..out.height {
            for c in 0..out.width {
                out.set_pixel(r, c, self.pixel(r / factor, c / factor));
            }
        }
        out
    }

    pub fn count_foreground(&self) -> usize {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_background(r, c))
            .count()
    }
}

pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    height: usize,
    width: usize,
    rows: Vec<String>,
}

impl From<Mask> for MaskRepr {
    fn from(m: Mask) -> Self {
        let rows = m
            .bits
            .chunks(m.width.max(1))
            .take(m.height)
            .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        Self {
            height: m.height,
            width: m.width,
            rows,
        }
    }
}

impl TryFrom<MaskRepr> for Mask {
    type Error = Error;

    fn try_from(r: MaskRepr) -> Result<Self> {
        if r.rows.len() != r.height {
            return Err(Error::Dimension(format!("mask has {} rows, expected {}", r.rows.len(), r.height)));
        }
        let mut bits = Vec::with_capacity(r.height * r.width);
        for row in &r.rows {
            if row.len() != r.width {
                return Err(Error::Dimension(format!("mask row has {} columns, expected {}", row.len(), r.width)));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => return Err(Error::Format(format!("mask row contains {other:?}"))),
                }
            }
        }
        Ok(Mask {
            height: r.height,
            width: r.width,
            bits,
        })
    }
}

/// A binary `height × width` mask.
///
/// Serialized as `{"height", "width", "rows"}` with one `0`/`1` string per row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let r = Raster::from_bytes(4, 3, &bytes).unwrap();
        assert_eq!(r.to_bytes(), bytes);
    }

    #[test]
    fn patch_extracts_rows() {
        let mut r = Raster::zeros(4, 4);
        r.set_pixel(1, 2, [1.0, 0.5, 0.0]);
        let p = r.patch(1, 1, 2, 2);
        assert_eq!(p.len(), 12);
        assert_eq!(&p[3..6], &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn iou_of_disjoint_masks_is_zero() {
        let mut a = Mask::new(2, 2);
        let mut b = Mask::new(2, 2);
        a.set(0, 0, true);
        b.set(1, 1, true);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(Mask::new(2, 2).iou(&Mask::new(2, 2)), 0.0);
    }
}

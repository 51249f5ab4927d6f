//! Dense real-valued images in normalized intensity units.
//!
//! Pixels are stored row-major with interleaved channels (`H x W x C`), so a
//! grayscale image is simply an `H x W` grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Image geometry: height, width and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::DimensionOverflow(format!("{height}x{width}x{channels}")))?;
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn gray(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 1)
    }

    /// Number of scalar entries, the `N` of every per-pixel normalization.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Single-row grayscale image, handy for small literal vectors.
    pub fn from_row(values: &[f64]) -> Self {
        let shape = Shape::gray(1, values.len().max(1)).expect("non-empty row");
        let mut data = values.to_vec();
        data.resize(shape.len(), 0.0);
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.as_tuple(),
                actual: other.shape.as_tuple(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(Image {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Image {
        self.map(|v| alpha * v)
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, other: &Image, alpha: f64) -> Result<Image> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `(1/N) * ||self - other||^2`
    pub fn mean_squared_distance(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.len() as f64)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    /// Population variance around the sample mean.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `size x size` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height() || col + width > self.width() {
            return Err(invalid(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let c = self.channels();
        let shape = Shape::new(height, width, c)?;
        let mut data = Vec::with_capacity(shape.len());
        for r in row..row + height {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image { shape, data })
    }

    /// Planar (`C x H x W`) copy of the pixel data.
    pub fn to_planar(&self) -> Vec<f64> {
        let (h, w, c) = self.shape.as_tuple();
        if c == 1 {
            return self.data.clone();
        }
        let mut out = vec![0.0; self.len()];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = self.data[p * c + ch];
            }
        }
        out
    }

    pub fn from_planar(shape: Shape, planar: &[f64]) -> Result<Image> {
        if planar.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: planar.len(),
            });
        }
        let (h, w, c) = shape.as_tuple();
        if c == 1 {
            return Image::from_vec(shape, planar.to_vec());
        }
        let mut data = vec![0.0; shape.len()];
        for p in 0..h * w {
            for ch in 0..c {
                data[p * c + ch] = planar[ch * h * w + p];
            }
        }
        Image::from_vec(shape, data)
    }
}

/// The eight symmetries of the square: `rotations` quarter turns
/// counter-clockwise, optionally preceded by a horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub flip: bool,
    pub rotations: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        rotations: 0,
    };

    pub fn from_index(index: usize) -> Dihedral {
        Dihedral {
            flip: index >= 4,
            rotations: (index % 4) as u8,
        }
    }

    /// Applies the transform to a square image.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        let (h, w, c) = image.shape().as_tuple();
        if h != w {
            return Err(invalid("dihedral transforms need square images"));
        }
        let n = h;
        let mut out = Image::zeros(image.shape());
        for r in 0..n {
            for col in 0..n {
                let (mut sr, mut sc) = (r, col);
                // inverse map: output (r, col) pulls from the source pixel
                for _ in 0..self.rotations {
                    let (a, b) = (sc, n - 1 - sr);
                    sr = a;
                    sc = b;
                }
                if self.flip {
                    sc = n - 1 - sc;
                }
                for ch in 0..c {
                    out.set(r, col, ch, image.get(sr, sc, ch));
                }
            }
        }
        Ok(out)
    }
}

//! The channels × height × width image carrier shared by every stage.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rank-3 (C, H, W) image with pixels nominally in [-1, 1].
///
/// Sources, reconstructions, DIRE residuals and detector inputs all use this
/// type. Storage is row-major `f32`, channel planes contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// (channels, height, width)
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn square(channels: usize, size: usize) -> Self {
        Self::new(channels, size, size)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl ImageTensor {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.numel()],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            data,
        })
    }

    pub fn filled(shape: ImageShape, value: f32) -> Self {
        Self {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: ImageShape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            data,
        }
    }

    /// Standard-normal image drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: ImageShape, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            data,
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_shape(&self, expected: ImageShape) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.dims().to_vec(),
                actual: self.shape().dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        other.ensure_shape(self.shape())?;
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn abs(&self) -> Self {
        self.map(f32::abs)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "mse shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Stack `other`'s channels after this image's channels.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Crop a `height × width` window whose top-left corner is (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidParameter(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let shape = ImageShape::new(self.channels, height, width);
        Ok(Self::from_fn(shape, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.shape(), |c, y, x| self.get(c, y, w - 1 - x))
    }

    /// Average all channels into a single plane.
    pub fn to_gray(&self) -> Self {
        let shape = ImageShape::new(1, self.height, self.width);
        let inv = 1.0 / self.channels as f32;
        Self::from_fn(shape, |_, y, x| {
            (0..self.channels).map(|c| self.get(c, y, x)).sum::<f32>() * inv
        })
    }
}

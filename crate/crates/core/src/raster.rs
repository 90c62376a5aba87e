//! Dense multi-channel images. Depth rasters use 0 as the "no value" sentinel.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major, channel-interleaved image: sample `(x, y, c)` lives at
/// `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

/// Single-channel depth image in meters; 0 marks invalid pixels.
pub type DepthRaster<T> = Raster<T>;

/// `s`-channel class image: one-hot for ground truth, raw scores when rendered.
pub type SemanticRaster<T> = Raster<T>;

impl<T: Real> Raster<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "raster {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// All channels of pixel `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Single-channel access by flat pixel index.
    #[inline]
    pub fn at(&self, idx: usize) -> T {
        self.data[idx * self.channels]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Depth validity: strictly positive and finite.
    #[inline]
    pub fn is_valid_depth(&self, idx: usize) -> bool {
        let d = self.at(idx);
        d > T::zero() && d.is_finite()
    }

    pub fn valid_count(&self) -> usize {
        (0..self.pixel_count()).filter(|&i| self.is_valid_depth(i)).count()
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, c: usize) -> Self {
        Self::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Every pixel holds exactly one 1 and zeros elsewhere.
    pub fn is_one_hot(&self) -> bool {
        (0..self.pixel_count()).all(|i| {
            let px = &self.data[i * self.channels..(i + 1) * self.channels];
            px.iter().filter(|&&v| v == T::one()).count() == 1 && px.iter().all(|&v| v == T::one() || v == T::zero())
        })
    }

    /// Index of the largest channel at pixel `(x, y)`.
    pub fn argmax(&self, x: usize, y: usize) -> usize {
        crate::mesh::argmax(self.pixel(x, y))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| crate::scalar::cast::<T, U>(v)).collect(),
        }
    }
}

/// One-hot class image from per-pixel labels.
pub fn one_hot<T: Real>(width: usize, height: usize, classes: usize, labels: &[usize]) -> Raster<T> {
    Raster::from_fn(width, height, classes, |x, y, c| if labels[y * width + x] == c { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_and_channels() {
        let r = Raster::<f64>::from_fn(3, 2, 2, |x, y, c| (x + 10 * y + 100 * c) as f64);
        assert_eq!(r.get(2, 1, 1), 112.0);
        assert_eq!(r.pixel(1, 1), &[11.0, 111.0]);
        assert_eq!(r.channel(1).get(0, 1, 0), 110.0);
        assert!(Raster::<f64>::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn one_hot_detection() {
        let r = one_hot::<f64>(2, 1, 3, &[0, 2]);
        assert!(r.is_one_hot());
        assert_eq!(r.argmax(1, 0), 2);
        let mut bad = r.clone();
        bad.set(0, 0, 1, 1.0);
        assert!(!bad.is_one_hot());
    }
}

//! Dense row-major raster buffers.

use crate::scalar::Real;

/// Mismatch between two raster shapes, reported as (height, width, channels).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape mismatch: expected {expected:?}, found {found:?}")]
pub struct ShapeError {
    pub expected: (usize, usize, usize),
    pub found: (usize, usize, usize),
}

/// An H×W×C array stored row-major as (row, column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Field<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::default())
    }
}

impl<T: Copy> Field<T> {
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self, ShapeError> {
        if data.len() != height * width * channels {
            return Err(ShapeError {
                expected: (height, width, channels),
                found: (data.len(), 1, 1),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a field by evaluating `f(row, col, channel)` in storage order.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
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

    /// Channel vector of pixel `(row, col)`.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Channel vector of the pixel with flat index `i = row * width + col`.
    #[inline]
    pub fn at(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: T) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Field<U> {
        Field {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Horizontally mirrored copy.
    pub fn mirrored(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(r, c));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn check_shape(&self, expected: (usize, usize, usize)) -> Result<(), ShapeError> {
        if self.shape() == expected {
            Ok(())
        } else {
            Err(ShapeError {
                expected,
                found: self.shape(),
            })
        }
    }
}

impl<T: Real> Field<T> {
    pub fn cast<U: Real>(&self) -> Field<U> {
        self.map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
    }
}

/// Checks that two buffers cover the same image plane (channels may differ).
pub fn check_plane(
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<(), ShapeError> {
    if expected == found {
        Ok(())
    } else {
        Err(ShapeError {
            expected: (expected.0, expected.1, 0),
            found: (found.0, found.1, 0),
        })
    }
}

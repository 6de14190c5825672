//! Shape-tagged dense arrays, the carrier for images, activations, gradients,
//! patches, and maps.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! `f32` (the default everywhere) and in `f64` for gradient verification.

use crate::error::{Error, Result};

/// Floating-point element type for tensors and network parameters.
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array with an explicit shape.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: vec![data.len()] });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the flat data. The shape is untouched, so the
    /// size invariant is preserved.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the same flat data under a new shape of equal size.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Flat index for a `[h, w, c]` tensor.
    #[inline]
    pub fn idx3(&self, row: usize, col: usize, chan: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (row * self.shape[1] + col) * self.shape[2] + chan
    }

    /// Elementwise maximum absolute difference against another tensor of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Cast elementwise through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// An image: a `[h, w, c]` tensor with 3 channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    tensor: Tensor<T>,
}

pub const IMAGE_CHANNELS: usize = 3;

impl<T: Scalar> Image<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[2] != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, IMAGE_CHANNELS],
                got: tensor.shape().to_vec(),
            });
        }
        let in_range = tensor.data().iter().all(|v| *v >= T::zero() && *v <= T::one());
        if !in_range {
            return Err(Error::invalid("image", "pixel values must lie in [0, 1]"));
        }
        Ok(Image { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image { tensor: self.tensor.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_size_mismatch() {
        let r = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn idx3_is_row_major() {
        let t = Tensor::<f32>::zeros(&[4, 5, 3]);
        assert_eq!(t.idx3(0, 0, 0), 0);
        assert_eq!(t.idx3(0, 0, 2), 2);
        assert_eq!(t.idx3(0, 1, 0), 3);
        assert_eq!(t.idx3(1, 0, 0), 15);
        assert_eq!(t.idx3(3, 4, 2), 4 * 5 * 3 - 1);
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        let mut t = Tensor::<f32>::zeros(&[2, 2, 3]);
        t.data_mut()[0] = 1.5;
        assert!(Image::new(t).is_err());
        let mut t = Tensor::<f32>::zeros(&[2, 2, 3]);
        t.data_mut()[0] = -0.1;
        assert!(Image::new(t).is_err());
    }

    #[test]
    fn image_rejects_wrong_channel_count() {
        let t = Tensor::<f32>::zeros(&[2, 2, 1]);
        assert!(Image::new(t).is_err());
    }

    #[test]
    fn ensure_finite_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[2]);
        t.data_mut()[1] = f32::NAN;
        assert!(t.ensure_finite("test").is_err());
    }
}

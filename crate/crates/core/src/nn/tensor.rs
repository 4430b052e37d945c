use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "tensor dims must be >= 1: {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "tensor dims must be >= 1: {shape:?}");
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Stacks single-channel images of one shape into an `(N, 1, H, W)` batch.
    pub fn from_images(images: &[&Image<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("empty image batch"))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.dims() != (w, h) {
                return Err(Error::shape("images in a batch must share one shape"));
            }
            data.extend_from_slice(img.as_slice());
        }
        Self::from_vec([images.len(), 1, h, w], data)
    }

    /// Extracts channel `c` of batch element `n` as an image.
    pub fn image(&self, n: usize, c: usize) -> Image<T> {
        let [_, _, h, w] = self.shape;
        let start = self.offset(n, c, 0, 0);
        Image::from_vec(w, h, self.data[start..start + h * w].to_vec()).expect("plane size")
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// Contiguous `C·H·W` slice of batch element `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

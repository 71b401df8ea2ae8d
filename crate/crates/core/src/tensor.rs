//! Dense rank-4 `f32` tensors in `(batch, channels, height, width)` layout.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor. Every extent is at least one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    /// The `[1, 1, 1, 1]` shape used for scalar losses.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// A dense tensor. Row-major, immutable once handed to a [`crate::tape::Tape`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} values supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Tensor {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Shape>, low: f32, high: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| low + (high - low) * rng.random::<f32>())
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Samples `start..start + count` along the batch axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        if count == 0 || start + count > self.shape.batch {
            return Err(Error::InvalidShape(format!(
                "batch slice {start}..{} out of {}",
                start + count,
                self.shape.batch
            )));
        }
        let per = self.shape.numel() / self.shape.batch;
        Ok(Tensor {
            shape: Shape { batch: count, ..self.shape },
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Concatenates tensors of identical non-batch extents along the batch axis.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("empty batch".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for p in parts {
            let s = p.shape;
            if (s.channels, s.height, s.width) != (first.shape.channels, first.shape.height, first.shape.width) {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    left: first.shape,
                    right: s,
                });
            }
            batch += s.batch;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape { batch, ..first.shape },
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec([1, 0, 2, 2], vec![]).is_err());
        let t = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 3.0);
    }

    #[test]
    fn batch_slice_and_stack_round_trip() {
        let t = Tensor::from_vec([3, 1, 1, 2], (0..6).map(|v| v as f32).collect()).unwrap();
        let a = t.batch_slice(0, 1).unwrap();
        let b = t.batch_slice(1, 2).unwrap();
        assert_eq!(Tensor::stack_batch(&[a, b]).unwrap(), t);
        assert!(t.batch_slice(2, 2).is_err());
    }
}

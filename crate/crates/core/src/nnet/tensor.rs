use std::fmt;

use crate::error::{Error, Result};

/// Height × width × channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Dense rank-3 array of `f64` with a gradient buffer of the same shape.
///
/// Storage is channel-major: each channel is a contiguous `height * width`
/// plane, which keeps the spatial convolutions' inner loops contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            values: vec![0.0; shape.len()],
            grad: vec![0.0; shape.len()],
        }
    }

    /// Builds a tensor from channel-major values.
    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape("Tensor::from_values", shape.len(), values.len()));
        }
        Ok(Tensor {
            shape,
            grad: vec![0.0; values.len()],
            values,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        for c in 0..shape.channels {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    let i = t.index(h, w, c);
                    t.values[i] = f(h, w, c);
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        debug_assert!(h < self.shape.height && w < self.shape.width && c < self.shape.channels);
        (c * self.shape.height + h) * self.shape.width + w
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.values[self.index(h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        let i = self.index(h, w, c);
        self.values[i] = v;
    }

    #[inline]
    pub fn grad_at(&self, h: usize, w: usize, c: usize) -> f64 {
        self.grad[self.index(h, w, c)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn grad_plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane();
        &self.grad[c * n..(c + 1) * n]
    }

    /// Values and gradient buffer borrowed together.
    pub fn split_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grad)
    }

    pub fn grad_plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane();
        &mut self.grad[c * n..(c + 1) * n]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stacks the channels of `self` followed by those of `other`.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if !self.shape.same_spatial(&other.shape) {
            return Err(Error::shape("concat_channels", self.shape, other.shape));
        }
        let shape = Shape::new(
            self.shape.height,
            self.shape.width,
            self.shape.channels + other.shape.channels,
        );
        let mut values = Vec::with_capacity(shape.len());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        Tensor::from_values(shape, values)
    }

    /// Splits a concatenated gradient back onto its two sources.
    pub fn split_grad_into(&self, first: &mut Tensor, second: &mut Tensor) {
        let n = first.values.len();
        debug_assert_eq!(n + second.values.len(), self.grad.len());
        add_into(&mut first.grad, &self.grad[..n]);
        add_into(&mut second.grad, &self.grad[n..]);
    }
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

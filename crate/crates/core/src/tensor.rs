//! Dense row-major tensors.
//!
//! Everything spatial in this crate is channel-first `[C, H, W, D]` with depth
//! as the fastest-varying axis.

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Spatial dims of a rank-4 `[C, H, W, D]` tensor.
    pub fn spatial(&self) -> [usize; 3] {
        debug_assert_eq!(self.rank(), 4);
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn check_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        self.map(|x| U::from(x).expect("float cast"))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scaled(&self, s: T) -> Tensor<T> {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Flat offset of `(c, h, w, d)` in a `[C, H, W, D]` tensor with spatial dims `dims`.
#[inline]
pub fn offset4(dims: [usize; 3], c: usize, h: usize, w: usize, d: usize) -> usize {
    ((c * dims[0] + h) * dims[1] + w) * dims[2] + d
}

/// Channel-wise softmax of a rank-4 logit tensor, in a numerically stable form.
pub fn softmax_channels<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.shape()[0];
    let vox = logits.len() / c;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for v in 0..vox {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(x[k * vox + v]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (x[k * vox + v] - m).exp();
            out[k * vox + v] = e;
            s = s + e;
        }
        for k in 0..c {
            out[k * vox + v] = out[k * vox + v] / s;
        }
    }
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

/// Channel-wise log-softmax (log-sum-exp form, no explicit softmax-then-log).
pub fn log_softmax_channels<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.shape()[0];
    let vox = logits.len() / c;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for v in 0..vox {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(x[k * vox + v]);
        }
        let mut s = T::zero();
        for k in 0..c {
            s = s + (x[k * vox + v] - m).exp();
        }
        let lse = m + s.ln();
        for k in 0..c {
            out[k * vox + v] = x[k * vox + v] - lse;
        }
    }
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

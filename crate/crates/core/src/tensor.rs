//! Dense row-major tensors of rank 1..=4 in canonical N,C,H,W axis order.

use crate::error::{Error, Result};
use crate::scalar::Element;

/// Named axes of the canonical rank-4 layout.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    /// Positional index of this axis in an N,C,H,W tensor.
    pub const fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }
}

/// Extent list of a tensor; rank 1..=4, every extent ≥ 1.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Shape> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "rank {} outside supported range 1..=4",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {dims:?}")));
        }
        Ok(Shape { dims: dims.to_vec() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.dims[i + 1];
        }
        s
    }

    fn dim4(&self, axis: Axis) -> usize {
        assert_eq!(self.rank(), 4, "axis accessors require a rank-4 tensor");
        self.dims[axis.index()]
    }

    pub fn n(&self) -> usize {
        self.dim4(Axis::Batch)
    }

    pub fn c(&self) -> usize {
        self.dim4(Axis::Channel)
    }

    pub fn h(&self) -> usize {
        self.dim4(Axis::Height)
    }

    pub fn w(&self) -> usize {
        self.dim4(Axis::Width)
    }
}

/// Dense tensor. Immutable from the caller's point of view once built; all
/// operations return fresh tensors, so shared references are safe across
/// threads.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Tensor<T> {
        let shape = Shape::new(dims).expect("internal tensor shape must be valid");
        let n = shape.numel();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(dims: &[usize], v: T) -> Tensor<T> {
        let shape = Shape::new(dims).expect("internal tensor shape must be valid");
        let n = shape.numel();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn ones(dims: &[usize]) -> Tensor<T> {
        Tensor::filled(dims, T::one())
    }

    /// Rank-1 single-element tensor, used for scalar learnables such as the
    /// branch scale parameters.
    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::filled(&[1], v)
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {dims:?} wants {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Tensor<T> {
        let mut t = Tensor::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires exactly one element");
        self.data[0]
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let d = self.shape.dims();
        debug_assert_eq!(d.len(), 4);
        self.data[((n * d[1] + c) * d[2] + h) * d[3] + w]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let d = self.shape.dims();
        debug_assert_eq!(d.len(), 4);
        self.data[((n * d[1] + c) * d[2] + h) * d[3] + w] = v;
    }

    pub fn at(&self, idx: &[usize]) -> T {
        let strides = self.shape.strides();
        assert_eq!(idx.len(), self.rank());
        let mut off = 0usize;
        for (i, &x) in idx.iter().enumerate() {
            assert!(x < self.dims()[i], "index {idx:?} out of bounds for {:?}", self.dims());
            off += x * strides[i];
        }
        self.data[off]
    }

    /// Same data, new extents; element order is preserved.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {dims:?} ({})",
                self.dims(),
                self.numel(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        if perm.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "permutation {perm:?} does not match rank {r}"
            )));
        }
        let mut seen = [false; 4];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::ShapeMismatch(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let in_dims = self.dims();
        let in_strides = self.shape.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
        let mut out = Tensor::zeros(&out_dims);
        let out_strides = out.shape.strides();
        // Walk output positions in order, gathering from the permuted input.
        let mut idx = vec![0usize; r];
        for o in 0..out.data.len() {
            let mut rem = o;
            let mut src = 0usize;
            for a in 0..r {
                idx[a] = rem / out_strides[a];
                rem %= out_strides[a];
                src += idx[a] * in_strides[perm[a]];
            }
            out.data[o] = self.data[src];
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise |a - b| against a same-shaped tensor, in f64.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff requires equal shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

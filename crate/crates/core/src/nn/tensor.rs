use std::fmt;

use super::{NnError, Scalar};

/// Shape of a 4-D tensor in `(batch, channels, rows, cols)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major 4-D tensor, batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Result<Self, NnError> {
        Self::check_shape(shape)?;
        Ok(Self {
            shape,
            data: vec![T::zero(); shape.len()],
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self, NnError> {
        Self::check_shape(shape)?;
        if data.len() != shape.len() {
            return Err(NnError::shape(
                "tensor",
                format!("{} elements for shape {shape}", shape.len()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    fn check_shape(shape: Shape4) -> Result<(), NnError> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(NnError::shape("tensor", "all dimensions >= 1", shape.to_string()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous slice of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Same data viewed as `(n, c·h·w, 1, 1)`.
    pub fn flattened(self) -> Self {
        let s = self.shape;
        Self {
            shape: Shape4::new(s.n, s.item_len(), 1, 1),
            data: self.data,
        }
    }

    pub fn reshaped(self, shape: Shape4) -> Result<Self, NnError> {
        Self::from_vec(shape, self.data)
    }

    /// Converts to f64 regardless of the stored precision.
    pub fn to_f64(&self) -> Tensor4<f64> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::shape(
                "matrix",
                format!("{} elements for {rows}x{cols}", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

impl<T: Scalar> From<Tensor4<T>> for Matrix<T> {
    /// Views `(n, c, h, w)` as `n × (c·h·w)`.
    fn from(t: Tensor4<T>) -> Self {
        let s = t.shape();
        Matrix {
            rows: s.n,
            cols: s.item_len(),
            data: t.into_vec(),
        }
    }
}

impl<T: Scalar> Matrix<T> {
    /// Views `n × k` as `(n, k, 1, 1)`.
    pub fn into_tensor(self) -> Result<Tensor4<T>, NnError> {
        Tensor4::from_vec(Shape4::new(self.rows, self.cols, 1, 1), self.data)
    }
}

//! Batched activations: either a feature matrix (one sample per column) or an
//! image tensor laid out `(sample, channel, row, col)`.

use crate::numerics::Matrix;

use super::NetError;

/// Shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image { c, h, w } => c * h * w,
        }
    }
}

/// Dense 4-axis array, row-major over `(n, c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_fn(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let k = t.idx(i, ch, y, x);
                        t.data[k] = f(i, ch, y, x);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn idx(&self, i: usize, c: usize, y: usize, x: usize) -> usize {
        ((i * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, i: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(i, c, y, x)]
    }

    pub fn sample_shape(&self) -> Shape {
        Shape::Image { c: self.c, h: self.h, w: self.w }
    }

    /// Columns are samples, rows enumerate `(c, y, x)`.
    pub fn to_matrix(&self) -> Matrix {
        let per = self.c * self.h * self.w;
        Matrix::from_fn(per, self.n, |r, i| self.data[i * per + r])
    }

    pub fn from_matrix(m: &Matrix, c: usize, h: usize, w: usize) -> Result<Self, NetError> {
        if m.nrows() != c * h * w {
            return Err(NetError::Shape(format!("cannot view {} features as {c}x{h}x{w}", m.nrows())));
        }
        let per = c * h * w;
        let mut t = Tensor4::zeros(m.ncols(), c, h, w);
        for i in 0..m.ncols() {
            for r in 0..per {
                t.data[i * per + r] = m[(r, i)];
            }
        }
        Ok(t)
    }

    /// Columns are `(sample, y, x)` pixels, rows are channels.
    pub fn channels_by_pixels(&self) -> Matrix {
        let hw = self.h * self.w;
        Matrix::from_fn(self.c, self.n * hw, |ch, col| {
            let (i, p) = (col / hw, col % hw);
            self.data[(i * self.c + ch) * hw + p]
        })
    }

    /// Inverse of `channels_by_pixels`.
    pub fn from_channels_by_pixels(m: &Matrix, n: usize, h: usize, w: usize) -> Result<Self, NetError> {
        let hw = h * w;
        if m.ncols() != n * hw {
            return Err(NetError::Shape(format!("{} columns cannot hold {n} images of {h}x{w}", m.ncols())));
        }
        let c = m.nrows();
        let mut t = Tensor4::zeros(n, c, h, w);
        for col in 0..n * hw {
            let (i, p) = (col / hw, col % hw);
            for ch in 0..c {
                t.data[(i * c + ch) * hw + p] = m[(ch, col)];
            }
        }
        Ok(t)
    }

    pub fn select(&self, cols: &[usize]) -> Self {
        let per = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(cols.len() * per);
        for &i in cols {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor4 { n: cols.len(), c: self.c, h: self.h, w: self.w, data }
    }
}

/// A batch of activations.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Flat(Matrix),
    Spatial(Tensor4),
}

impl Value {
    pub fn n_samples(&self) -> usize {
        match self {
            Value::Flat(m) => m.ncols(),
            Value::Spatial(t) => t.n,
        }
    }

    pub fn sample_shape(&self) -> Shape {
        match self {
            Value::Flat(m) => Shape::Flat(m.nrows()),
            Value::Spatial(t) => t.sample_shape(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Value::Flat(m) => m.as_slice(),
            Value::Spatial(t) => &t.data,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Value::Flat(m) => m.as_mut_slice(),
            Value::Spatial(t) => &mut t.data,
        }
    }

    pub fn zeros_like(&self) -> Value {
        match self {
            Value::Flat(m) => Value::Flat(Matrix::zeros(m.nrows(), m.ncols())),
            Value::Spatial(t) => Value::Spatial(Tensor4::zeros(t.n, t.c, t.h, t.w)),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Value {
        let mut out = self.clone();
        out.as_mut_slice().iter_mut().for_each(|x| *x = f(*x));
        out
    }

    /// Features-by-samples view; images are flattened in `(c, y, x)` order.
    pub fn to_flat(&self) -> Matrix {
        match self {
            Value::Flat(m) => m.clone(),
            Value::Spatial(t) => t.to_matrix(),
        }
    }

    pub fn as_flat(&self) -> Result<&Matrix, NetError> {
        match self {
            Value::Flat(m) => Ok(m),
            Value::Spatial(_) => Err(NetError::Shape("expected flat activations, got images".into())),
        }
    }

    pub fn as_spatial(&self) -> Result<&Tensor4, NetError> {
        match self {
            Value::Spatial(t) => Ok(t),
            Value::Flat(_) => Err(NetError::Shape("expected image activations, got flat".into())),
        }
    }

    pub fn select(&self, cols: &[usize]) -> Value {
        match self {
            Value::Flat(m) => Value::Flat(m.select_columns(cols)),
            Value::Spatial(t) => Value::Spatial(t.select(cols)),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.as_slice().iter().map(|x| x * x).sum()
    }

    pub fn dot(&self, other: &Value) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }
}

impl From<Matrix> for Value {
    fn from(m: Matrix) -> Self {
        Value::Flat(m)
    }
}

impl From<Tensor4> for Value {
    fn from(t: Tensor4) -> Self {
        Value::Spatial(t)
    }
}

/// Append the constant-one bias row to a feature matrix.
pub fn with_bias_row(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::from_element(r + 1, c, 1.0);
    out.view_mut((0, 0), (r, c)).copy_from(m);
    out
}

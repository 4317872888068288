//! Dense row-major matrices and the numeric kernels shared by inference and
//! the gradient tape.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "accumulate shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.len(), "reshape size");
        Self {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    /// `x · wᵀ + b` with `w` stored `out × in` and `b` a `1 × out` row.
    pub fn linear(&self, w: &Self, b: &Self) -> Self {
        assert_eq!(self.cols, w.cols, "linear: input width");
        assert_eq!((1, w.rows), b.shape(), "linear: bias shape");
        let mut out = Vec::with_capacity(self.rows * w.rows);
        for n in 0..self.rows {
            let x = self.row(n);
            for o in 0..w.rows {
                let acc = x
                    .iter()
                    .zip(w.row(o))
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                out.push(acc + b.data[o]);
            }
        }
        Self::from_vec(self.rows, w.rows, out)
    }

    /// Multiplies every row elementwise by `row` (`1 × cols`).
    pub fn mul_row(&self, row: &Self) -> Self {
        assert_eq!((1, self.cols), row.shape(), "row broadcast shape");
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.cols) {
            for (v, &r) in chunk.iter_mut().zip(&row.data) {
                *v *= r;
            }
        }
        out
    }

    pub fn add_row(&self, row: &Self) -> Self {
        assert_eq!((1, self.cols), row.shape(), "row broadcast shape");
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.cols) {
            for (v, &r) in chunk.iter_mut().zip(&row.data) {
                *v += r;
            }
        }
        out
    }

    /// Column sums as a `1 × cols` row.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for chunk in self.data.chunks(self.cols) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Self::from_vec(1, self.cols, out)
    }

    pub fn gather_cols(&self, idx: &[usize]) -> Self {
        let mut out = Vec::with_capacity(self.rows * idx.len());
        for r in 0..self.rows {
            let row = self.row(r);
            out.extend(idx.iter().map(|&c| row[c]));
        }
        Self::from_vec(self.rows, idx.len(), out)
    }

    /// Inverse of two `gather_cols` calls over complementary index sets.
    pub fn merge_cols(a: &Self, a_idx: &[usize], b: &Self, b_idx: &[usize]) -> Self {
        assert_eq!(a.rows, b.rows, "merge rows");
        assert_eq!((a.cols, b.cols), (a_idx.len(), b_idx.len()), "merge widths");
        let cols = a.cols + b.cols;
        let mut out = Self::zeros(a.rows, cols);
        for r in 0..a.rows {
            let dst = &mut out.data[r * cols..(r + 1) * cols];
            for (&c, &v) in a_idx.iter().zip(a.row(r)) {
                dst[c] = v;
            }
            for (&c, &v) in b_idx.iter().zip(b.row(r)) {
                dst[c] = v;
            }
        }
        out
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Self::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn concat_rows(parts: &[&Self]) -> Self {
        let cols = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == cols), "concat widths");
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

pub(crate) fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `σ(upper) − σ(lower)` evaluated on whichever tail keeps precision.
pub(crate) fn sigmoid_diff<T: Scalar>(upper: T, lower: T) -> T {
    if upper + lower > T::zero() {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::<f64>::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let w = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]);
        let b = Tensor::from_vec(1, 2, vec![0.5, -0.5]);
        let y = x.linear(&w, &b);
        assert_eq!(y.shape(), (2, 2));
        assert!((y.get(0, 0) - 1.9).abs() < 1e-12);
        assert!((y.get(0, 1) - 4.5).abs() < 1e-12);
        assert!((y.get(1, 0) - 0.5).abs() < 1e-12);
        assert!((y.get(1, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gather_merge_roundtrip() {
        let x = Tensor::from_vec(2, 4, (0..8).map(|v| v as f64).collect());
        let even = [0, 2];
        let odd = [1, 3];
        let a = x.gather_cols(&even);
        let b = x.gather_cols(&odd);
        assert_eq!(Tensor::merge_cols(&a, &even, &b, &odd), x);
    }

    #[test]
    fn stable_sigmoid_difference() {
        // far right tail: naive difference would cancel to 0
        let d = sigmoid_diff(40.5f64, 39.5);
        assert!(d > 0.0 && d < 1e-16);
        assert!((sigmoid_diff(0.5f64, -0.5) - (sigmoid(0.5) - sigmoid(-0.5))).abs() < 1e-15);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
    }
}

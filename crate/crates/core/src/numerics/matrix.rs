use super::{NumericsError, Real};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

fn mismatch(op: &'static str, left: (usize, usize), right: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch { op, left, right }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(mismatch("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; panics on ragged input (test and fixture helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().map(|&x| T::from_f64(x))).collect(),
        }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        if self.cols != other.rows {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        if self.rows != other.rows {
            return Err(mismatch("t_matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        if self.cols != other.cols {
            return Err(mismatch("matmul_t", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] =
                    a.iter().zip(other.row(j)).map(|(&x, &y)| x * y).sum();
            }
        }
        Ok(out)
    }

    /// Add a `1 x cols` bias row to every row.
    pub fn add_bias(&self, bias: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        let mut out = self.clone();
        out.add_bias_in_place(bias)?;
        Ok(out)
    }

    pub fn add_bias_in_place(&mut self, bias: &Matrix<T>) -> Result<(), NumericsError> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(mismatch("add_bias", self.shape(), bias.shape()));
        }
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` matrix (the bias gradient of [`Matrix::add_bias`]).
    pub fn sum_rows(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(mismatch("add", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        if self.shape() != other.shape() {
            return Err(mismatch("hadamard", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        })
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[&[17.0], &[39.0]]));
        assert!(matches!(
            b.matmul(&b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identity_is_neutral() {
        let a = Matrix::<f64>::from_rows(&[&[0.3, -1.2, 2.0], &[4.0, 0.5, -0.7], &[1.1, 9.0, 0.0]]);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn bias_shape_checked() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(a.add_bias(&Matrix::zeros(1, 2)).is_err());
        let b = a.add_bias(&Matrix::from_rows(&[&[1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(b.row(1), [1.0, 2.0, 3.0]);
        assert_eq!(b.sum_rows().as_slice(), [2.0, 4.0, 6.0]);
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn transposed_products_agree(a in mat(3, 4), b in mat(3, 2), c in mat(5, 4)) {
            let via_t = a.transpose().matmul(&b).unwrap();
            let direct = a.t_matmul(&b).unwrap();
            for (x, y) in via_t.as_slice().iter().zip(direct.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let via_t = a.matmul(&c.transpose()).unwrap();
            let direct = a.matmul_t(&c).unwrap();
            for (x, y) in via_t.as_slice().iter().zip(direct.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

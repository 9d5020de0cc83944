//! Dense row-major matrices and the handful of kernels the policy needs.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        self.axpy(1.0, other);
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy_slice(orow, a, other.row(k));
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `self += aᵀ · b`
    pub fn add_t_matmul(&mut self, a: &Tensor, b: &Tensor) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(self.shape(), (a.cols, b.cols));
        for r in 0..a.rows {
            let brow = b.row(r);
            for (i, &av) in a.row(r).iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                axpy_slice(&mut self.data[i * b.cols..(i + 1) * b.cols], av, brow);
            }
        }
    }

    /// `self += x ⊗ y` for a `len(x) × len(y)` matrix.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64]) {
        assert_eq!(self.shape(), (x.len(), y.len()));
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            axpy_slice(&mut self.data[i * y.len()..(i + 1) * y.len()], xv, y);
        }
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            axpy_slice(self.row_mut(i), 1.0, v);
        }
    }

    /// Adds the column sums of `m` into this row vector.
    pub fn add_col_sums(&mut self, m: &Tensor) {
        assert_eq!(self.len(), m.cols);
        for i in 0..m.rows {
            axpy_slice(&mut self.data, 1.0, m.row(i));
        }
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            axpy_slice(&mut out, 1.0, self.row(i));
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy_slice(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// `x · W` for a row vector `x`.
pub fn vec_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0; w.cols()];
    for (k, &a) in x.iter().enumerate() {
        if a != 0.0 {
            axpy_slice(&mut out, a, w.row(k));
        }
    }
    out
}

/// `W · x` for a column vector `x`, i.e. `x · Wᵀ` as a row.
pub fn matmul_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), w.cols());
    (0..w.rows()).map(|i| dot(w.row(i), x)).collect()
}

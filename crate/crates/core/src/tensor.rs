use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> Option<T> {
        (self.shape() == (1, 1)).then(|| self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `x · w + b` with a fixed summation order: for each output entry the
/// products are accumulated over the input index in increasing order, then
/// the bias is added.
pub(crate) fn matmul_bias<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, cin) = x.shape();
    let cout = w.cols();
    let mut out = Tensor::zeros(n, cout);
    for r in 0..n {
        let xr = x.row(r);
        let orow = &mut out.data[r * cout..(r + 1) * cout];
        for (i, &xi) in xr.iter().enumerate().take(cin) {
            let wrow = w.row(i);
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
        if let Some(b) = b {
            for (o, &bv) in orow.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with the same accumulation order as [`matmul_bias`].
pub(crate) fn matmul_transposed<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    matmul_bias(a, &b.transpose(), None)
}

/// `aᵀ · b`, accumulating over rows in increasing order.
pub(crate) fn transposed_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca) = a.shape();
    let cb = b.cols();
    let mut out = Tensor::zeros(ca, cb);
    for r in 0..n {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &ai) in ar.iter().enumerate() {
            let orow = &mut out.data[i * cb..(i + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += ai * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(2, 2, vec![1.0; 3]).is_err());
        let t = Tensor::<f64>::from_vec(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), (2, 3));
    }

    #[test]
    fn matmul_routes_agree() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = Tensor::from_rows(&[[1.0, -1.0], [0.5, 2.0]]);
        let ab = matmul_bias(&a, &b, None);
        assert_eq!(ab.data(), &[2.0, 3.0, 5.0, 5.0, 8.0, 7.0]);
        let abt = matmul_transposed(&a, &b.transpose());
        assert_eq!(ab, abt);
        let atb = transposed_matmul(&a.transpose(), &b);
        assert_eq!(ab, atb);
    }
}

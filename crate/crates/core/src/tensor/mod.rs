//! Dense row-major tensors and the raw kernels shared by the tape and the
//! no-grad fast paths.
//!
//! Everything runs in `Real` precision (`f64` by default, `f32` behind the
//! `single-precision` feature). Gradient checks and all test oracles assume
//! the double-precision default.

mod check;
mod opt;
mod tape;

pub use check::finite_diff_check;
pub use opt::{Adam, SgdMomentum};
pub use tape::{sigmoid, Gradients, Op, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// Dense tensor: a shape plus row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows. Rows must be rectangular.
    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for row in rows {
            if row.len() != m {
                return Err(Error::Contract("ragged rows in tensor literal".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    /// Number of rows when interpreted as 2-D (a bare vector is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when interpreted as 2-D.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> Real {
        self.data[row * self.cols() + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: Real) {
        let cols = self.cols();
        self.data[row * cols + col] = value;
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────
//
// Fixed ascending accumulation order: the masked-forward / compact-network
// equivalence relies on padded zero terms being added in place, and
// determinism relies on a stable summation order.

/// C[n,m] = A[n,k] · B[k,m]
pub fn matmul(a: &[Real], b: &[Real], n: usize, k: usize, m: usize) -> Vec<Real> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[n,m] = A[n,k] · B[m,k]ᵀ
pub fn matmul_tb(a: &[Real], b: &[Real], n: usize, k: usize, m: usize) -> Vec<Real> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * m + j] = s;
        }
    }
    c
}

/// C[k,m] = A[n,k]ᵀ · B[n,m]
pub fn matmul_ta(a: &[Real], b: &[Real], n: usize, k: usize, m: usize) -> Vec<Real> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for j in 0..m {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// rows of A[n,m] += bias[m], in place
pub fn add_bias_in_place(a: &mut [Real], bias: &[Real]) {
    let m = bias.len();
    for row in a.chunks_mut(m) {
        for (x, b) in row.iter_mut().zip(bias) {
            *x += *b;
        }
    }
}

pub fn tanh_in_place(a: &mut [Real]) {
    for x in a.iter_mut() {
        *x = x.tanh();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &id, 2, 2, 2), a);
    }

    #[test]
    fn matmul_variants_agree() {
        // A[2,3]·B[3,2] three ways.
        let a = vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
        let b = vec![2.0, 1.0, 0.0, -1.0, 1.5, 2.0];
        let c = matmul(&a, &b, 2, 3, 2);
        // Bᵀ as [2,3]:
        let bt = vec![2.0, 0.0, 1.5, 1.0, -1.0, 2.0];
        assert_eq!(matmul_tb(&a, &bt, 2, 3, 2), c);
        // Aᵀ as [3,2] fed through matmul_ta:
        let at = vec![1.0, 3.0, -2.0, 4.0, 0.5, -1.0];
        assert_eq!(matmul_ta(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }
}

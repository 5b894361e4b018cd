//! Dense row-major tensors of `f64` plus the plain (non-recorded) math the
//! rest of the crate builds on.
//!
//! The autodiff tape in [`crate::tape`] records these same forward routines;
//! keeping them here as free functions lets tests call them directly.

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build a matrix from rows; all rows must share one length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Contract("matrix rows have unequal lengths".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extents of a rank-2 tensor as (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                other
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product of an `m x k` and a `k x n` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    // i-k-j loop order keeps the inner accesses contiguous.
    for i in 0..m {
        for k in 0..ka {
            let av = a.data[i * ka + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix-vector product of an `m x k` matrix and a `k` vector.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, k) = w.dims2()?;
    if x.rank() != 1 || x.numel() != k {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &w.data[i * k..(i + 1) * k];
        let mut acc = 0.0;
        for j in 0..k {
            acc += row[j] * x.data[j];
        }
        out[i] = acc;
    }
    Ok(Tensor::vector(out))
}

/// Elementwise activation kinds used by the gate equations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// Logistic sigmoid. Saturates to 0 or 1 at the extremes instead of
/// overflowing: `exp(-x)` hits +inf for very negative x and the quotient
/// collapses to 0.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gaussian error linear unit, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Apply sigmoid or tanh elementwise.
pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    let data = x
        .data
        .iter()
        .map(|&v| match kind {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Row-wise softmax with max subtraction. Rank-1 input is treated as a
/// single row. Each output row sums to 1 and preserves the row's argmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = match x.shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, x.numel()),
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        softmax_into(row, None, orow);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Softmax of one row into `out`, optionally restricted to positions where
/// `keep` is true. Excluded positions get exactly 0. A row with no kept
/// position comes back all zero.
pub(crate) fn softmax_into(row: &[f64], keep: Option<&[bool]>, out: &mut [f64]) {
    let kept = |j: usize| keep.map_or(true, |k| k[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if kept(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if kept(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let id = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&a, &id).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let z = Tensor::zeros(vec![2, 3]);
        let b = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let c = matmul(&z, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_values() {
        assert_close(sigmoid(0.0), 0.5, 1e-15);
        // sigmoid(ln 3) = 1 / (1 + 1/3) = 0.75
        assert_close(sigmoid(3.0_f64.ln()), 0.75, 1e-12);
        // saturation never produces NaN
        assert_eq!(sigmoid(-1e6), 0.0);
        assert_eq!(sigmoid(1e6), 1.0);
    }

    #[test]
    fn sigmoid_symmetry_and_tanh_odd() {
        for i in -40..=40 {
            let x = i as f64 * 0.37;
            assert_close(sigmoid(x) + sigmoid(-x), 1.0, 1e-12);
            assert_close((x).tanh() + (-x).tanh(), 0.0, 1e-12);
        }
        assert_eq!(0.0_f64.tanh(), 0.0);
    }

    #[test]
    fn activate_ranges() {
        let x = Tensor::vector(vec![-30.0, -1.0, 0.0, 2.0, 50.0]);
        let s = activate(&x, Activation::Sigmoid);
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let t = activate(&x, Activation::Tanh);
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(s.is_finite() && t.is_finite());
    }

    #[test]
    fn softmax_uniform_and_ln3() {
        let u = softmax_rows(&Tensor::vector(vec![0.0, 0.0, 0.0]));
        for &v in u.data() {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
        let p = softmax_rows(&Tensor::vector(vec![0.0, 3.0_f64.ln()]));
        assert_close(p.data()[0], 0.25, 1e-12);
        assert_close(p.data()[1], 0.75, 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_argmax() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = Tensor::vector(x.data().iter().map(|v| v + 123.0).collect());
        let a = softmax_rows(&x);
        let b = softmax_rows(&shifted);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_close(*u, *v, 1e-12);
        }
        let argmax = |t: &Tensor| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&a), 2);
        assert_eq!(argmax(&x), argmax(&a));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| (v as f64) * 0.7 - 3.0).collect()).unwrap();
        let p = softmax_rows(&x);
        for r in 0..3 {
            let s: f64 = p.data()[r * 4..(r + 1) * 4].iter().sum();
            assert_close(s, 1.0, 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for i in -20..=20 {
            let x = i as f64 * 0.3;
            let eps = 1e-6;
            let num = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert_close(gelu_prime(x), num, 1e-7);
        }
    }
}

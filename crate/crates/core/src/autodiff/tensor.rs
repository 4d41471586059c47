//! Dense row-major `f64` tensors and the raw kernels every autodiff mode
//! shares. Shapes are explicit `Vec<usize>`; a scalar has the empty shape.

use super::AdError;
use crate::par;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor. Construction through [`Tensor::new`] rejects
/// non-finite entries; kernels assume finite inputs and do not re-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: the data length must match the shape product and
    /// every entry must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(AdError::LengthMismatch {
                op: "new",
                shape,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite { op: "new" });
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape, vec![0.0; n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape, vec![value; n])
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![], vec![value])
    }

    /// Stacks equally long rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AdError> {
        if rows.is_empty() {
            return Err(AdError::EmptyInput { op: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AdError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Extracts the single element of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64, AdError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(AdError::NotScalar {
                op: "scalar_value",
                shape: self.shape.clone(),
            })
        }
    }

    /// Re-checks the construction invariants (used after deserialization).
    pub fn validate(&self) -> Result<(), AdError> {
        let expected: usize = self.shape.iter().product();
        if self.data.len() != expected {
            return Err(AdError::LengthMismatch {
                op: "validate",
                shape: self.shape.clone(),
                expected,
                got: self.data.len(),
            });
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite { op: "validate" });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Both dimensions of a rank-2 tensor, or an error naming the op.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), AdError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(AdError::NotMatrix {
                op,
                shape: self.shape.clone(),
            })
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), AdError> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AdError> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        self.map(|v| v + k)
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.map(|v| v.max(lo))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor, AdError> {
        if lo > hi {
            return Err(AdError::InvalidArg {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        Ok(self.map(|v| v.clamp(lo, hi)))
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.map(f64::ln)
    }

    pub fn sin(&self) -> Tensor {
        self.map(f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        self.map(f64::cos)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Heaviside step (1 for strictly positive input). Piecewise constant, so
    /// its derivative is zero everywhere it exists; both autodiff modes treat
    /// it as locally constant.
    pub fn step_pos(&self) -> Tensor {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    /// Pointwise derivative of [`Tensor::gelu`].
    pub fn gelu_prime(&self) -> Tensor {
        self.map(gelu_prime_scalar)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Mean of all elements as a rank-0 tensor. Errors on empty tensors.
    pub fn mean(&self) -> Result<Tensor, AdError> {
        if self.data.is_empty() {
            return Err(AdError::EmptyInput { op: "mean" });
        }
        Ok(Tensor::scalar(
            self.data.iter().sum::<f64>() / self.data.len() as f64,
        ))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(AdError::InnerDim {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        par::matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor, AdError> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    /// Per-row Euclidean norm of a matrix: `[b, d] -> [b]`.
    pub fn row_l2norm(&self) -> Result<Tensor, AdError> {
        let (b, d) = self.dims2("row_l2norm")?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = &self.data[i * d..(i + 1) * d];
            out.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        Ok(Tensor::from_raw(vec![b], out))
    }

    /// Per-row dot product of two equally shaped matrices: `[b, d] -> [b]`.
    pub fn row_dot(&self, other: &Tensor) -> Result<Tensor, AdError> {
        self.same_shape(other, "row_dot")?;
        let (b, d) = self.dims2("row_dot")?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let lo = i * d;
            let hi = lo + d;
            out.push(
                self.data[lo..hi]
                    .iter()
                    .zip(&other.data[lo..hi])
                    .map(|(&x, &y)| x * y)
                    .sum(),
            );
        }
        Ok(Tensor::from_raw(vec![b], out))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, AdError> {
        if parts.is_empty() {
            return Err(AdError::EmptyInput { op: "concat_cols" });
        }
        let (rows, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(AdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_raw(vec![rows, total], out))
    }

    /// Copies columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor, AdError> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(AdError::ColRange {
                op: "slice_cols",
                start,
                end,
                cols,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&self.data[i * cols + start..i * cols + end]);
        }
        Ok(Tensor::from_raw(vec![rows, w], out))
    }

    /// Repeats a vector `[n]` as every row of a `[rows, n]` matrix.
    pub fn broadcast_row(&self, rows: usize) -> Result<Tensor, AdError> {
        if self.shape.len() != 1 {
            return Err(AdError::NotMatrix {
                op: "broadcast_row",
                shape: self.shape.clone(),
            });
        }
        let n = self.data.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(&self.data);
        }
        Ok(Tensor::from_raw(vec![rows, n], out))
    }

    /// Repeats a vector `[b]` as every column of a `[b, cols]` matrix.
    pub fn broadcast_col(&self, cols: usize) -> Result<Tensor, AdError> {
        if self.shape.len() != 1 {
            return Err(AdError::NotMatrix {
                op: "broadcast_col",
                shape: self.shape.clone(),
            });
        }
        let b = self.data.len();
        let mut out = Vec::with_capacity(b * cols);
        for &v in &self.data {
            out.extend(std::iter::repeat(v).take(cols));
        }
        Ok(Tensor::from_raw(vec![b, cols], out))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, AdError> {
        let to_n: usize = shape.iter().product();
        if to_n != self.numel() {
            return Err(AdError::ReshapeCount {
                op: "reshape",
                from: self.shape.clone(),
                from_n: self.numel(),
                to: shape,
                to_n,
            });
        }
        Ok(Tensor::from_raw(shape, self.data.clone()))
    }
}

pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_COEF: f64 = 0.044_715;

/// Tanh-form gelu: `0.5 x (1 + tanh(c0 (x + c1 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_prime_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, AdError::NonFinite { .. }));
        let err = Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap_err();
        assert!(matches!(err, AdError::NonFinite { .. }));
    }

    #[test]
    fn new_rejects_bad_length() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, AdError::LengthMismatch { .. }));
    }

    #[test]
    fn matmul_known_product() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[1.0], &[1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_dim_error_names_shapes() {
        let a = t2(&[&[1.0, 2.0, 3.0]]);
        let b = t2(&[&[1.0, 2.0]]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[1, 2]"), "{msg}");
    }

    #[test]
    fn transpose_round_trip() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let tt = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a, tt);
        assert_eq!(a.transpose().unwrap().shape(), &[3, 2]);
        assert_eq!(a.transpose().unwrap().at2(2, 1), 6.0);
    }

    #[test]
    fn row_norm_and_dot() {
        let a = t2(&[&[3.0, 4.0]]);
        assert_eq!(a.row_l2norm().unwrap().data(), &[5.0]);
        let x = t2(&[&[1.0, 0.0]]);
        let y = t2(&[&[0.0, 1.0]]);
        assert_eq!(x.row_dot(&y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = t2(&[&[1.0, 2.0], &[5.0, 6.0]]);
        let b = t2(&[&[3.0], &[7.0]]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        assert_eq!(c.slice_cols(0, 2).unwrap(), a);
        assert_eq!(c.slice_cols(2, 3).unwrap(), b);
    }

    #[test]
    fn broadcasts() {
        let v = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = v.broadcast_row(3).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.row(2), &[1.0, 2.0]);
        let c = v.broadcast_col(3).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.row(1), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_mean_scalars() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.sum().scalar_value().unwrap(), 10.0);
        assert_eq!(a.mean().unwrap().scalar_value().unwrap(), 2.5);
        assert!(a.sum().is_scalar());
        assert_eq!(a.sum().rank(), 0);
    }

    #[test]
    fn clamp_family() {
        let a = Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(a.clamp_min(0.0).data(), &[0.0, 0.5, 2.0]);
        assert_eq!(a.clamp(0.0, 1.0).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert!(a.clamp(1.0, 0.0).is_err());
        assert_eq!(a.step_pos().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(a.relu().data(), &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn reshape_checks_count() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.reshape(vec![4]).unwrap().shape(), &[4]);
        assert!(a.reshape(vec![3]).is_err());
    }

    #[test]
    fn gelu_prime_matches_central_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            let ana = gelu_prime_scalar(x);
            assert!(
                (num - ana).abs() < 1e-8 * (1.0 + ana.abs()),
                "x={x}: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn zero_column_matrices_are_legal() {
        let a = Tensor::zeros(vec![3, 0]);
        assert_eq!(a.numel(), 0);
        let b = t2(&[&[1.0], &[2.0], &[3.0]]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 1]);
    }
}

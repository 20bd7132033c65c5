//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a shape plus a flat buffer. Every constructor checks that
//! the buffer length matches the shape and that all values are finite, so a
//! tensor that exists is always well formed.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} expects {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: matrix is singular")]
    Singular { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values already known to be finite and of matching length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        assert!(value.is_finite());
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(vec![rows, cols], values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Mutable access for in-place updates; callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copy with one coordinate shifted by `delta`.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.data[index] += delta;
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out).check_finite("matmul")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "transpose",
            msg: format!("expected a matrix, got shape {:?}", a.shape),
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Valid-padding, stride-1 cross-correlation.
///
/// `input` is `[C, H, W]`, `kernels` is `[F, C, kh, kw]`, `bias` is `[F]`.
/// Summation order is channel, then kernel row, then kernel column.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w, f, kh, kw) = conv_dims(input, kernels, bias)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let irow = (ci * h + y + ky) * w + x;
                        let krow = ((fi * c + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += input.data[irow + kx] * kernels.data[krow + kx];
                        }
                    }
                }
                out[(fi * oh + y) * ow + x] = acc + bias.data[fi];
            }
        }
    }
    Tensor::from_parts(vec![f, oh, ow], out).check_finite("conv2d")
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape.clone(),
        rhs: kernels.shape.clone(),
    };
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(mismatch());
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (f, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c {
        return Err(mismatch());
    }
    if kh > h || kw > w {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
        });
    }
    if bias.shape != [f] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            lhs: kernels.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    Ok((c, h, w, f, kh, kw))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a slice.
pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape.clone(), softmax_slice(&x.data))
}

pub const L2_EPS: f64 = 1e-12;

/// `x / max(‖x‖₂, 1e-12)`; the zero vector maps to itself.
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let scale = 1.0 / x.norm().max(L2_EPS);
    x.map(|v| v * scale)
}

/// Capsule squashing of a single vector: `‖s‖²/(1+‖s‖²) · s/‖s‖`.
pub fn squash_slice(s: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let norm = sq.sqrt();
    let scale = norm / (1.0 + sq);
    s.iter().map(|v| v * scale).collect()
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape[0] != a.shape[1] {
        return Err(TensorError::InvalidArgument {
            op: "inverse",
            msg: format!("expected a square matrix, got shape {:?}", a.shape),
        });
    }
    let n = a.shape[0];
    let mut m = a.data.clone();
    let mut inv = Tensor::identity(n).data;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col].abs() < 1e-300 {
            return Err(TensorError::Singular { op: "inverse" });
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = m[r * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= factor * m[col * n + k];
                inv[r * n + k] -= factor * inv[col * n + k];
            }
        }
    }
    Tensor::from_parts(vec![n, n], inv).check_finite("inverse")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_cases() {
        let a = Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let r = matmul(
            &Tensor::matrix(1, 2, &[1.0, 2.0]).unwrap(),
            &Tensor::matrix(2, 1, &[3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = matmul(&Tensor::zeros(&[2, 3]), &Tensor::full(&[3, 2], 7.5)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn conv_shapes() {
        let out = conv2d(
            &Tensor::zeros(&[1, 50, 50]),
            &Tensor::zeros(&[1, 1, 9, 9]),
            &Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 42, 42]);
        let err = conv2d(
            &Tensor::zeros(&[1, 4, 4]),
            &Tensor::zeros(&[1, 1, 5, 3]),
            &Tensor::zeros(&[1]),
        );
        assert!(err.is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let out = conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn l2_cases() {
        let v = l2_normalize(&Tensor::vector(&[3.0, 4.0]).unwrap());
        assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&Tensor::zeros(&[2])), Tensor::zeros(&[2]));
    }

    #[test]
    fn softmax_stability() {
        let s = softmax_slice(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
        let u = softmax_slice(&[0.0, 0.0, 0.0]);
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn squash_cases() {
        assert_eq!(squash_slice(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = squash_slice(&[3.0, 4.0]);
        assert!((v[0] - 25.0 / 26.0 * 0.6).abs() < 1e-15);
        assert!((v[1] - 25.0 / 26.0 * 0.8).abs() < 1e-15);
        let unit = squash_slice(&[0.6, 0.8]);
        let n: f64 = unit.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inverse_roundtrip() {
        let a = Tensor::matrix(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]).unwrap();
        let inv = inverse(&a).unwrap();
        let prod = matmul(&a, &inv).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(3)) < 1e-14);
        assert!(inverse(&Tensor::zeros(&[2, 2])).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::TensorError;

/// Dense row-major tensor of `f64` values.
///
/// Every value is finite; constructors reject NaN and infinities. The
/// gradient buffer is only ever allocated for tensors that require it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        let mut t = Tensor::new(raw.shape, raw.data)?;
        t.requires_grad = raw.requires_grad;
        Ok(t)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor { shape: t.shape, data: t.data, requires_grad: t.requires_grad }
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("construction"));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel = check_shape(&shape)?;
        Self::new(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let numel = check_shape(&shape)?;
        Self::new(shape, vec![value; numel])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(vec![1], vec![value])
    }

    /// Builder-style toggle of gradient tracking.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension for 2-D tensors, 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        if !self.is_scalar() {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if !self.requires_grad {
            return Err(TensorError::FrozenGrad);
        }
        if grad.len() != self.data.len() {
            return Err(TensorError::DataLength { shape: self.shape.clone(), len: grad.len() });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Overwrites values in place. The replacement must be finite and of equal length.
    pub fn assign(&mut self, data: &[f64]) -> Result<(), TensorError> {
        if data.len() != self.data.len() {
            return Err(TensorError::DataLength { shape: self.shape.clone(), len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("assign"));
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let numel = check_shape(&shape)?;
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: self.shape.clone(), right: shape });
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: self.requires_grad, grad: None })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::InvalidShape(self.shape.clone()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.as_matrix_dims("matmul")?;
        let (k2, n) = other.as_matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        super::kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    /// Matrix-vector product against a flat vector of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        let (m, k) = self.as_matrix_dims("matvec")?;
        if x.len() != k {
            return Err(TensorError::ShapeMismatch { op: "matvec", left: self.shape.clone(), right: vec![x.len()] });
        }
        // `0.0 +` mirrors the accumulate-into-zeros kernels bit for bit.
        Ok((0..m).map(|i| 0.0 + super::kernels::dot(&self.data[i * k..(i + 1) * k], x)).collect())
    }

    pub(crate) fn as_matrix_dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::ShapeMismatch { op, left: self.shape.clone(), right: vec![] }),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn hash_into(&self, h: &mut Fnv64) {
        for &d in &self.shape {
            h.write_u64(d as u64);
        }
        for v in &self.data {
            h.write_u64(v.to_bits());
        }
    }
}

/// FNV-1a, used for parameter checksums that must be stable across runs.
#[derive(Clone, Copy, Debug)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn frozen_tensor_refuses_grad() {
        let mut t = Tensor::vector(vec![1.0]).unwrap();
        assert!(t.set_grad(vec![0.0]).is_err());
        t.set_requires_grad(true);
        t.set_grad(vec![2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[2.0][..]));
    }

    #[test]
    fn serde_roundtrip_drops_grad() {
        let mut t = Tensor::matrix(1, 2, vec![0.1, -3.5]).unwrap().with_grad(true);
        t.set_grad(vec![1.0, 1.0]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert!(back.bit_eq(&t));
        assert!(back.requires_grad());
        assert!(back.grad().is_none());
    }

    #[test]
    fn plain_matmul() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(a.matmul(&a.reshape(vec![1, 4]).unwrap()).is_err());
    }
}

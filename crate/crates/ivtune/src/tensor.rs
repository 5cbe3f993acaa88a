//! Dense row-major tensors.
//!
//! All arithmetic runs in `f64`. The [`DType`] tag records the storage
//! precision used when a tensor is written to a container file; tensors
//! tagged [`DType::F32`] only ever hold values that are exactly
//! representable in `f32`, so save/load round trips are bit-exact in
//! both precisions.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Storage precision for serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Dense n-dimensional array with row-major contiguous storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. Every dimension must
    /// be positive and the data length must equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor::new",
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor::new",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            dtype: DType::F64,
            data,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            dtype: DType::F64,
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            dtype: DType::F64,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            dtype: DType::F64,
            data: vec![v; numel],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            dtype: DType::F64,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Truncated normal initialization: N(0, std²) resampled until |x| <= 2·std.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| loop {
            let x = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                return x;
            }
        })
    }

    /// Uniform samples in [lo, hi).
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data under a new shape (must preserve the element count).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor::reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Retag storage precision. Casting to F32 rounds every value through
    /// `f32` so the tag's representability invariant holds.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = match dtype {
            DType::F64 => self.data.clone(),
            DType::F32 => self.data.iter().map(|&v| v as f32 as f64).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
        }
    }

    /// Error out if any value is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, dtype, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::trunc_normal(vec![4096], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        // Not degenerate.
        assert!(t.data().iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn f32_cast_rounds_through_f32() {
        let t = Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap();
        let q = t.to_dtype(DType::F32);
        for &v in q.data() {
            assert_eq!(v, v as f32 as f64);
        }
        assert_eq!(q.to_dtype(DType::F64).data(), q.data());
    }

    #[test]
    fn finite_guard_rejects_nan() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.ensure_finite("test").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.ensure_finite("test").is_err());
    }
}

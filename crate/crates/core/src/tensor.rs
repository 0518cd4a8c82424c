//! Dense rank-≤4 float tensors.
//!
//! `Tensor` is the universal value type for activations, weights, and
//! gradients: a flat row-major `f32` buffer plus an explicit shape.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Tensor shape: up to four strictly positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(extents: impl Into<Vec<usize>>) -> Result<Self> {
        let extents = extents.into();
        if extents.is_empty() || extents.len() > MAX_RANK {
            return Err(Error::validation(format!(
                "shape rank must be 1..={MAX_RANK}, got {}",
                extents.len()
            )));
        }
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::validation(format!(
                "shape extents must be positive, got {extents:?}"
            )));
        }
        Ok(Shape(extents))
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.0
    }

    /// Total element count (product of extents).
    pub fn count(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "]")
    }
}

impl std::ops::Index<usize> for Shape {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::validation(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let shape = Shape::new(vec![data.len()]).expect("non-empty vec");
        Tensor { shape, data }
    }

    /// Placeholder for "no tensor" slots (empty weights on non-trainable
    /// layers). Carries zero elements; `is_empty` distinguishes it.
    pub fn empty() -> Self {
        Tensor {
            shape: Shape(vec![]),
            data: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serialize the data buffer as little-endian bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }
}

pub(crate) fn f32_slice_to_le_bytes(vals: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn le_bytes_to_f32_vec(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated(format!(
            "float buffer length {} not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(vec![3, 0, 2]).is_err());
    }

    #[test]
    fn shape_rejects_rank_5() {
        assert!(Shape::new(vec![1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn tensor_len_must_match_shape() {
        let s = Shape::new(vec![2, 3]).unwrap();
        assert!(Tensor::new(s.clone(), vec![0.0; 5]).is_err());
        assert!(Tensor::new(s, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn le_round_trip() {
        let t = Tensor::from_vec(vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE]);
        let bytes = t.to_le_bytes();
        let back = le_bytes_to_f32_vec(&bytes).unwrap();
        assert_eq!(back, t.data());
    }

    #[test]
    fn argmax_first_on_tie() {
        let t = Tensor::from_vec(vec![0.5, 0.5]);
        assert_eq!(t.argmax(), 0);
    }
}

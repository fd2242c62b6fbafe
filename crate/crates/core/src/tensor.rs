//! Dense row-major f32 tensors.

use crate::error::{CoreError, Result};

/// A dense tensor. `grad`, when present, has the same length as `data` and
/// is filled in by [`crate::tape::Tape::backward`] extraction or by
/// [`crate::gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::shape(
                "TensorValue::new",
                format!("shape {:?} wants {} elements, data has {}", shape, n, data.len()),
            ));
        }
        Ok(TensorValue { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorValue { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        TensorValue { shape: vec![], data: vec![v], grad: None }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(TensorValue::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorValue::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = TensorValue::scalar(4.5);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.len(), 1);
    }
}

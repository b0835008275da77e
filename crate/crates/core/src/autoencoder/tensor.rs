use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Dimensions as `[batch, channels, length]`, treating a rank-2 tensor
    /// as a batch of one.
    pub(crate) fn bcl(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, l] => Ok((1, c, l)),
            [b, c, l] => Ok((b, c, l)),
            _ => Err(shape_err!(
                "expected a [C, L] or [B, C, L] tensor, got {:?}",
                self.shape
            )),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "cannot add {:?} to {:?}",
                other.shape,
                self.shape
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

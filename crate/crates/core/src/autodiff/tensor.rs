use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad shapes and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Self::from_raw(shape, values))
    }

    /// Internal constructor for values produced by kernels. Shape consistency
    /// is asserted, finiteness is not checked.
    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    /// Row-major matrix from nested rows; convenient in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(
            vec![r, c],
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.values.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.values[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.values[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `[B, rows, cols]` view of the trailing two axes, folding any leading
    /// axes into the batch extent.
    pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
        match shape.len() {
            1 => (1, 1, shape[0]),
            n => {
                let batch = shape[..n - 2].iter().product();
                (batch, shape[n - 2], shape[n - 1])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_input() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_inconsistent_shape() {
        let err = Tensor::new(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }
}

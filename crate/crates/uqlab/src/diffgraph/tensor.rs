use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("tensor contains a non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// Dense row-major tensor of `f64` values. Rank 1 and 2 are the only shapes
/// the graph ops produce; rank-2 tensors carry a batch in their columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Tensor { shape, values })
    }

    /// Unchecked constructor for internal use where shape/length agreement
    /// is guaranteed by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            values: values.to_vec(),
        }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scalar view; panics if the tensor has more than one element.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "tensor is not a scalar: shape {:?}", self.shape);
        self.values[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Number of rows for rank-1/2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns; 1 for rank-1 tensors.
    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

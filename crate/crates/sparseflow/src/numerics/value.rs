//! Plain dense tensors: shape + row-major `f64` storage.
//!
//! [`Value`] is the storage type for parameters, constants and anything that
//! lives outside a differentiation tape. Tape participation happens through
//! [`crate::numerics::Tensor`].

/// Dense n-dimensional array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, got {}",
            data.len()
        );
        Value { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Value::new(shape, vec![0.0; numel])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Value::new(shape, vec![1.0; numel])
    }

    pub fn scalar(x: f64) -> Self {
        Value::new(vec![1], vec![x])
    }

    /// Row-major matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * c);
        for r in rows {
            assert_eq!(r.len(), c, "ragged rows: expected width {c}, got {}", r.len());
            data.extend_from_slice(r);
        }
        Value::new(vec![n, c], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// Element of a rank-2 value.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.shape.len(), 2, "Value::at needs rank 2, got {:?}", self.shape);
        self.data[i * self.shape[1] + j]
    }
}

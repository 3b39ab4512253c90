use super::{Float, NumericsError};

/// Dense row-major array with an optional accumulated gradient.
///
/// Rank-0 tensors (`shape == []`) hold a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
    requires_grad: bool,
    grad: Option<Vec<Float>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::InvalidArgument {
                op: "tensor",
                reason: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: Float) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<Float>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::InvalidArgument {
                op: "tensor",
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[Float]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [Float]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[Float]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Float {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Number of rows when the tensor is viewed as `(prod(leading dims)) x last dim`.
pub(crate) fn rows_of(shape: &[usize]) -> usize {
    match shape.split_last() {
        Some((_, lead)) => lead.iter().product(),
        None => 1,
    }
}

/// Size of the last dimension; 1 for scalars.
pub(crate) fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.0);
        assert!(s.shape().is_empty());
        assert_eq!(rows_of(s.shape()), 1);
        assert_eq!(cols_of(s.shape()), 1);
    }
}

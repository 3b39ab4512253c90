use super::{Float, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; the returned vars are indexed by [`ParamId`].
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.input(t)).collect()
    }

    /// Adds the gradients of the bound vars into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Multiplies every stored gradient by `factor`.
    pub fn scale_grads(&mut self, factor: Float) {
        for g in self.tensors.iter_mut().filter_map(Tensor::grad_mut) {
            g.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Euclidean norm over all stored gradients.
    pub fn grad_norm(&self) -> Float {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<Float>()
            .sqrt()
    }
}

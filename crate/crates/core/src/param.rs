use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor with its hierarchical name
/// (`<block>.<layer>.weight`, e.g. `conv3-2.ge.gather.dw1.weight`).
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Non-learnable state saved with the model (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(ParamId),
    Buffer(BufferId),
}

/// Registry of every parameter and buffer of one model, in creation order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        let id = ParamId(self.params.len());
        self.claim(&name, Slot::Param(id))?;
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        let id = BufferId(self.buffers.len());
        self.claim(&name, Slot::Buffer(id))?;
        self.buffers.push(Buffer { name, value });
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(id)) => Some(*id),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(id)) => Some(*id),
            _ => None,
        }
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `grad += delta`, creating the gradient on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        crate::kernels::same_shape("accumulate_grad", p.value.shape(), delta.shape())?;
        match &mut p.grad {
            None => p.grad = Some(delta.clone()),
            Some(g) => g.data_mut().iter_mut().zip(delta.data()).for_each(|(a, &d)| *a += d),
        }
        Ok(())
    }

    /// Converts every tensor to another element type, keeping names and order.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn duplicate_names_rejected_across_kinds() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a.weight", Tensor::zeros(Shape::scalar())).unwrap();
        assert!(s.add_param("a.weight", Tensor::zeros(Shape::scalar())).is_err());
        assert!(s.add_buffer("a.weight", Tensor::zeros(Shape::scalar())).is_err());
    }

    #[test]
    fn accumulate_sums() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add_param("p", Tensor::zeros(Shape::new(1, 2, 1, 1))).unwrap();
        let d = Tensor::full(Shape::new(1, 2, 1, 1), 1.5);
        s.accumulate_grad(id, &d).unwrap();
        s.accumulate_grad(id, &d).unwrap();
        assert_eq!(s.param(id).grad.as_ref().unwrap().data(), &[3.0, 3.0]);
    }
}

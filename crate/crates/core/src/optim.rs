use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every parameter and clears the gradients.
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
            return Err(Error::state(format!("parameter `{}` has no gradient", p.name)));
        }
        self.velocity.resize(store.params().len(), None);
        for (p, v) in store.params_mut().iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad.take().expect("checked above");
            let v = v.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (mu, wd) = (self.momentum, self.weight_decay);
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for ((vi, pi), &gi) in vd.iter_mut().zip(pd.iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Momentum buffer per parameter, zeros where no step has happened yet.
    pub fn velocities(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.velocity
                    .get(i)
                    .and_then(Option::clone)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }

    pub fn set_velocities(&mut self, v: Vec<Tensor<T>>) {
        self.velocity = v.into_iter().map(Some).collect();
    }
}

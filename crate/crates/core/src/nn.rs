//! Parameterised layers and the per-forward context that binds a
//! [`ParamStore`] to a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchNormMode, Gradients, Tape, Var};
use crate::error::Result;
use crate::kernels::norm::BN_MOMENTUM;
use crate::kernels::{Conv2dSpec, RunningStats};
use crate::param::{BufferId, ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// One forward pass over a model's parameters.
pub struct Ctx<'s, T: Real = f32> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    stat_updates: Vec<(BufferId, BufferId, RunningStats<T>)>,
}

/// What a finished forward/backward pass leaves for the store.
pub struct Outcome<T: Real = f32> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub stat_updates: Vec<(BufferId, BufferId, RunningStats<T>)>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.params().len()],
            train,
            stat_updates: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(store: &'s ParamStore<T>, tape: Tape<T>, train: bool) -> Self {
        Ctx {
            tape,
            ..Ctx::new(store, train)
        }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Routes a parameter to an existing variable instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.param(id).value.clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Backpropagates from `loss` (if given) and collects parameter
    /// gradients and pending running-statistic updates.
    pub fn finish(self, loss: Option<Var>) -> Result<Outcome<T>> {
        let grads = match loss {
            None => Vec::new(),
            Some(loss) => {
                let bound = self.bound;
                let mut g: Gradients<T> = self.tape.backward(loss)?;
                bound
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.and_then(|v| g.take(v)).map(|t| (ParamId(i), t)))
                    .collect()
            }
        };
        Ok(Outcome {
            grads,
            stat_updates: self.stat_updates,
        })
    }
}

impl<T: Real> ParamStore<T> {
    /// Accumulates gradients and folds batch statistics into running ones.
    pub fn apply(&mut self, outcome: Outcome<T>) -> Result<()> {
        for (id, g) in &outcome.grads {
            self.accumulate_grad(*id, g)?;
        }
        let m = T::lit(BN_MOMENTUM);
        for (mean_id, var_id, batch) in outcome.stat_updates {
            for (buf, fresh) in [(mean_id, batch.mean), (var_id, batch.var)] {
                let slot = self.buffer_mut(buf).value.data_mut();
                slot.iter_mut()
                    .zip(fresh)
                    .for_each(|(r, b)| *r = (T::one() - m) * *r + m * b);
            }
        }
        Ok(())
    }
}

fn he_normal<T: Real>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_, _, _, _| T::lit(normal.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-initialised weights `(cout, cin/groups, kh, kw)`; zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        let cin_g = cin / spec.groups.max(1);
        let shape = Shape::new(cout, cin_g, kernel.0, kernel.1);
        let weight = store.add_param(
            format!("{name}.weight"),
            he_normal(shape, cin_g * kernel.0 * kernel.1, rng),
        )?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros(Shape::new(1, cout, 1, 1)))?)
        } else {
            None
        };
        Ok(Conv2d {
            name,
            weight,
            bias,
            spec,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    /// γ = 1, β = 0, running mean 0 and variance 1.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        let shape = Shape::new(1, channels, 1, 1);
        Ok(BatchNorm2d {
            gamma: store.add_param(format!("{name}.weight"), Tensor::ones(shape))?,
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros(shape))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(shape))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(shape))?,
            name,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, batch) = ctx.tape.batchnorm2d(x, g, b, BatchNormMode::Train)?;
            if let Some(batch) = batch {
                ctx.stat_updates.push((self.running_mean, self.running_var, batch));
            }
            Ok(y)
        } else {
            let stats = RunningStats {
                mean: ctx.store.buffer(self.running_mean).value.data().to_vec(),
                var: ctx.store.buffer(self.running_var).value.data().to_vec(),
            };
            let (y, _) = ctx.tape.batchnorm2d(x, g, b, BatchNormMode::Eval(Some(&stats)))?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from N(0, 1/in); zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: impl Into<String>,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let name = name.into();
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("finite std");
        let w = Tensor::from_fn(Shape::new(outputs, inputs, 1, 1), |_, _, _, _| {
            T::lit(normal.sample(rng))
        });
        Ok(Linear {
            weight: store.add_param(format!("{name}.weight"), w)?,
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(Shape::new(1, outputs, 1, 1)))?,
            name,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable call appends one node holding its output and what
//! its adjoint needs. Nodes are appended in execution order, so reverse
//! index order is a valid reverse topological order and a backward pass
//! visits each node exactly once.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, BnSaved};
use crate::kernels::{self, interp, pool, same_shape, sigmoid, Conv2dSpec, PoolGeom, RunningStats};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    MaxPool {
        x: Var,
        geom: PoolGeom,
        argmax: Vec<u32>,
    },
    Nearest {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    GlobalAvg {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// How a batch-norm call normalizes.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T: Real> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics; `None` is a state error.
    Eval(Option<&'a RunningStats<T>>),
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Debug builds assert that finite inputs give finite outputs; turn this
    /// off where overflow is expected and handled by the caller.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on && cfg!(debug_assertions);
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if self.check_finite && inputs.iter().all(|&v| self.nodes[v.0].value.all_finite()) {
            debug_assert!(value.all_finite(), "non-finite output from finite inputs");
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (y, geom) = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Average pooling with a square window and symmetric zero padding,
    /// always dividing by `k²`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        let geom = PoolGeom::symmetric(s.h, s.w, k, stride, pad)?;
        Ok(self.avg_pool_with(x, geom))
    }

    pub fn avg_pool_with(&mut self, x: Var, geom: PoolGeom) -> Var {
        let y = pool::avg_pool_forward(self.value(x), &geom);
        self.push(y, Op::AvgPool { x, geom }, &[x])
    }

    /// Max pooling; padded positions never win.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        let geom = PoolGeom::symmetric(s.h, s.w, k, stride, pad)?;
        Ok(self.max_pool_with(x, geom))
    }

    pub fn max_pool_with(&mut self, x: Var, geom: PoolGeom) -> Var {
        let (y, argmax) = pool::max_pool_forward(self.value(x), &geom);
        self.push(y, Op::MaxPool { x, geom, argmax }, &[x])
    }

    pub fn nearest_interpolate(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = interp::nearest_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Nearest { x }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu { x }, &[x])
    }

    /// Element-wise product of two tensors of identical shape.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.shape(a), self.shape(b))?;
        let y = kernels::zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(y, Op::Hadamard { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let y = kernels::zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// Fully connected layer on the flattened (C, H, W) features; the output
    /// has shape (N, out, 1, 1).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    /// Batch normalization with affine parameters `gamma`, `beta` of shape
    /// (1, C, 1, 1). In training mode also returns the batch mean and the
    /// unbiased batch variance.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let c = self.shape(x).c;
        for (v, axis) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).numel() != c {
                return Err(Error::Dimension {
                    op: "batchnorm2d",
                    axis,
                    expected: c,
                    got: self.value(v).numel(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (y, saved, batch) = match mode {
            BatchNormMode::Train => {
                let (y, saved, stats) = norm::bn_train_forward(self.value(x), g, b);
                (y, saved, Some(stats))
            }
            BatchNormMode::Eval(None) => {
                return Err(Error::state(
                    "batchnorm in eval mode without populated running statistics",
                ))
            }
            BatchNormMode::Eval(Some(stats)) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::Dimension {
                        op: "batchnorm2d",
                        axis: "running statistics",
                        expected: c,
                        got: stats.mean.len(),
                    });
                }
                let (y, saved) = norm::bn_eval_forward(self.value(x), g, b, stats);
                (y, saved, None)
            }
        };
        let var = self.push(y, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta]);
        Ok((var, batch))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = kernels::global_avg_forward(self.value(x));
        self.push(y, Op::GlobalAvg { x }, &[x])
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_ce_forward(self.value(logits), labels)?;
        // Fold the labels into the saved gradient: p - onehot.
        let k = self.shape(logits).item();
        let mut grad = probs;
        for (n, &l) in labels.iter().enumerate() {
            grad[n * k + l] -= T::one();
        }
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, probs: grad }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Backpropagates from a scalar loss, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {shape}")));
        }
        self.backward_seeded(loss, Tensor::ones(shape))
    }

    /// Backpropagates an explicit upstream gradient `seed` for `out`.
    pub fn backward_seeded(self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        same_shape("backward seed", self.shape(out), seed.shape())?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed.into_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut leaf_grads, i);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Tensor<T>>],
        index: usize,
    ) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<T>| accumulate(&mut grads[v.0], delta);
        match &node.op {
            Op::Leaf => {
                leaf_grads[index] = Some(Tensor::from_parts(node.value.shape(), g));
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (wants(*x), wants(*w), b.is_some_and(&wants));
                let out = conv::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), &g, need);
                if let Some(dx) = out.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = out.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, out.db) {
                    acc(*b, db);
                }
            }
            Op::AvgPool { x, geom } => {
                acc(*x, pool::avg_pool_backward(self.shape(*x), geom, &g));
            }
            Op::MaxPool { x, geom, argmax } => {
                acc(
                    *x,
                    pool::max_pool_backward(self.shape(*x), argmax, geom.oh * geom.ow, &g),
                );
            }
            Op::Nearest { x } => {
                let s = node.value.shape();
                acc(*x, interp::nearest_backward(self.shape(*x), s.h, s.w, &g));
            }
            Op::Sigmoid { x: input } => {
                let y = node.value.data();
                acc(*input, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Hadamard { a, b } => {
                if wants(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, g.iter().zip(bv).map(|(&d, &v)| d * v).collect());
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    acc(*b, g.iter().zip(av).map(|(&d, &v)| d * v).collect());
                }
            }
            Op::Add { a, b } => {
                if wants(*a) && wants(*b) {
                    acc(*a, g.clone());
                    acc(*b, g);
                } else if wants(*a) {
                    acc(*a, g);
                } else {
                    acc(*b, g);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let outs = node.value.shape().c;
                let features = xs.item();
                if wants(*x) {
                    let mut dx = vec![T::zero(); xs.numel()];
                    crate::linalg::gemm(
                        false,
                        false,
                        xs.n,
                        features,
                        outs,
                        &g,
                        self.value(*w).data(),
                        T::zero(),
                        &mut dx,
                    );
                    acc(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); outs * features];
                    crate::linalg::gemm(
                        true,
                        false,
                        outs,
                        features,
                        xs.n,
                        &g,
                        self.value(*x).data(),
                        T::zero(),
                        &mut dw,
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![T::zero(); outs];
                    for row in g.chunks(outs) {
                        db.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    acc(b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dgamma, dbeta) = norm::bn_backward(self.shape(*x), saved, self.value(*gamma).data(), &g);
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::GlobalAvg { x } => {
                let s = self.shape(*x);
                let area = T::from_usize(s.plane()).expect("area");
                let mut dx = Vec::with_capacity(s.numel());
                for &d in &g {
                    dx.extend(std::iter::repeat_n(d / area, s.plane()));
                }
                acc(*x, dx);
            }
            Op::SoftmaxCe { logits, probs } => {
                let n = T::from_usize(self.shape(*logits).n).expect("batch");
                let scale = g[0] / n;
                acc(*logits, probs.iter().map(|&p| p * scale).collect());
            }
            Op::Sum { x } => {
                acc(*x, vec![g[0]; self.shape(*x).numel()]);
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
    }
}

/// Gradients of the leaves reached by one backward pass.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| (n + c + h + w) as f32),
            true,
        );
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let y = tape.hadamard(x, k).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(k).is_none());
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 3.0));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 2.0), true);
        let y = tape.hadamard(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn eval_batchnorm_without_stats_is_state_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)), false);
        let g = tape.leaf(Tensor::ones(Shape::new(1, 2, 1, 1)), true);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)), true);
        let err = tape.batchnorm2d(x, g, b, BatchNormMode::Eval(None)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}

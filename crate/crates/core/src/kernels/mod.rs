//! Forward and backward kernels over raw tensors. The tape in
//! [`crate::autograd`] records which of these ran and replays their adjoints.

pub mod conv;
pub mod interp;
pub mod norm;
pub mod pool;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Real, Shape, Tensor};

pub use conv::Conv2dSpec;
pub use norm::RunningStats;
pub use pool::PoolGeom;

pub(crate) fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    let axes = [
        ("batch", a.n, b.n),
        ("channel", a.c, b.c),
        ("height", a.h, b.h),
        ("width", a.w, b.w),
    ];
    for (axis, expected, got) in axes {
        if expected != got {
            return Err(Error::Dimension {
                op,
                axis,
                expected,
                got,
            });
        }
    }
    Ok(())
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `x` viewed as (N, features) times `w` (out, features) transposed, plus bias.
pub(crate) fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let features = xs.item();
    if ws.item() != features {
        return Err(Error::Dimension {
            op: "linear",
            axis: "features",
            expected: ws.item(),
            got: features,
        });
    }
    if let Some(b) = b {
        if b.numel() != ws.n {
            return Err(Error::Dimension {
                op: "linear",
                axis: "bias",
                expected: ws.n,
                got: b.numel(),
            });
        }
    }
    let out = Shape::new(xs.n, ws.n, 1, 1);
    let mut y = vec![T::zero(); out.numel()];
    gemm(false, true, xs.n, ws.n, features, x.data(), w.data(), T::zero(), &mut y);
    if let Some(b) = b {
        for row in y.chunks_mut(ws.n) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
        }
    }
    Ok(Tensor::from_parts(out, y))
}

pub(crate) fn global_avg_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let area = T::from_usize(s.plane()).expect("area");
    let y = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), y)
}

/// Mean softmax cross-entropy; returns the loss and row-wise probabilities.
pub(crate) fn softmax_ce_forward<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let s = logits.shape();
    let k = s.item();
    if labels.len() != s.n {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            axis: "batch",
            expected: s.n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            axis: "class label",
            expected: k,
            got: bad,
        });
    }
    let mut probs = Vec::with_capacity(s.numel());
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        total += log_denom - (row[label] - max);
        probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
    }
    Ok((total / T::from_usize(s.n).expect("batch"), probs))
}

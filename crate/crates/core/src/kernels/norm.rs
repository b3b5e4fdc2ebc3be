//! Per-channel batch normalization over (batch, height, width).

use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics were used (gradient flows through mean/var).
    pub batch_stats: bool,
}

fn channel_iter(s: Shape) -> impl Iterator<Item = (usize, usize, std::ops::Range<usize>)> {
    let plane = s.plane();
    (0..s.n).flat_map(move |n| {
        (0..s.c).map(move |c| {
            let start = (n * s.c + c) * plane;
            (n, c, start..start + plane)
        })
    })
}

fn normalize<T: Real>(x: &[T], mean: T, inv_std: T, gamma: T, beta: T, xhat: &mut [T], y: &mut [T]) {
    for ((&v, h), o) in x.iter().zip(xhat.iter_mut()).zip(y.iter_mut()) {
        *h = (v - mean) * inv_std;
        *o = gamma * *h + beta;
    }
}

/// Training-mode forward. Returns the output, saved values, and the batch
/// mean together with the unbiased batch variance for running-stat updates.
pub(crate) fn bn_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnSaved<T>, RunningStats<T>) {
    let s = x.shape();
    let xd = x.data();
    let count = s.n * s.plane();
    let m = T::from_usize(count).expect("count");
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); s.c];
    for (_, c, r) in channel_iter(s) {
        mean[c] += xd[r].iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    let mut var = vec![T::zero(); s.c];
    for (_, c, r) in channel_iter(s) {
        var[c] += xd[r].iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
    }
    let unbiased: Vec<T> = var
        .iter()
        .map(|&v| if count > 1 { v / (m - T::one()) } else { v })
        .collect();
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut y = vec![T::zero(); s.numel()];
    for (_, c, r) in channel_iter(s) {
        normalize(
            &xd[r.clone()],
            mean[c],
            inv_std[c],
            gamma[c],
            beta[c],
            &mut xhat[r.clone()],
            &mut y[r],
        );
    }
    (
        Tensor::from_parts(s, y),
        BnSaved {
            xhat,
            inv_std,
            batch_stats: true,
        },
        RunningStats { mean, var: unbiased },
    )
}

pub(crate) fn bn_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
) -> (Tensor<T>, BnSaved<T>) {
    let s = x.shape();
    let xd = x.data();
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut y = vec![T::zero(); s.numel()];
    for (_, c, r) in channel_iter(s) {
        normalize(
            &xd[r.clone()],
            stats.mean[c],
            inv_std[c],
            gamma[c],
            beta[c],
            &mut xhat[r.clone()],
            &mut y[r],
        );
    }
    (
        Tensor::from_parts(s, y),
        BnSaved {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Real>(s: Shape, saved: &BnSaved<T>, gamma: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for (_, c, r) in channel_iter(s) {
        for (&d, &h) in dy[r.clone()].iter().zip(&saved.xhat[r]) {
            dgamma[c] += d * h;
            dbeta[c] += d;
        }
    }
    let mut dx = vec![T::zero(); s.numel()];
    if saved.batch_stats {
        let m = T::from_usize(s.n * s.plane()).expect("count");
        for (_, c, r) in channel_iter(s) {
            let k = gamma[c] * saved.inv_std[c] / m;
            let (db, dg) = (dbeta[c], dgamma[c]);
            for ((o, &d), &h) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&saved.xhat[r]) {
                *o = k * (m * d - db - h * dg);
            }
        }
    } else {
        for (_, c, r) in channel_iter(s) {
            let k = gamma[c] * saved.inv_std[c];
            for (o, &d) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                *o = k * d;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardized_per_channel() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 2, 2), |n, c, h, w| {
            (n * 8 + c * 4 + h * 2 + w) as f64 * (c as f64 + 1.0)
        });
        let (y, _, stats) = bn_train_forward(&x, &[1.0, 1.0], &[0.0, 0.0]);
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..4).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 2, i % 2))
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 8.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.mean.len(), 2);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1, 2), 3.0);
        let stats = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - BN_EPS as f32],
        };
        let (y, _) = bn_eval_forward(&x, &[2.0], &[0.5], &stats);
        assert_eq!(y.data(), &[2.5, 2.5]);
    }
}

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Source row/column for each output coordinate: `⌊u·in/out⌋`.
pub fn nearest_index(out_len: usize, in_len: usize) -> Vec<usize> {
    (0..out_len).map(|u| u * in_len / out_len).collect()
}

pub(crate) fn check_upsample(x: Shape, oh: usize, ow: usize) -> Result<()> {
    if oh < x.h || ow < x.w || x.h == 0 || x.w == 0 {
        return Err(Error::config(format!(
            "nearest interpolation only upsamples: {}x{} -> {oh}x{ow}",
            x.h, x.w
        )));
    }
    Ok(())
}

pub(crate) fn nearest_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_upsample(s, oh, ow)?;
    let rows = nearest_index(oh, s.h);
    let cols = nearest_index(ow, s.w);
    let out = Shape::new(s.n, s.c, oh, ow);
    let mut y = Vec::with_capacity(out.numel());
    for plane in x.data().chunks(s.plane()) {
        for &r in &rows {
            y.extend(cols.iter().map(|&c| plane[r * s.w + c]));
        }
    }
    Ok(Tensor::from_parts(out, y))
}

pub(crate) fn nearest_backward<T: Real>(in_shape: Shape, oh: usize, ow: usize, dy: &[T]) -> Vec<T> {
    let rows = nearest_index(oh, in_shape.h);
    let cols = nearest_index(ow, in_shape.w);
    let mut dx = vec![T::zero(); in_shape.numel()];
    let ip = in_shape.plane();
    for (p, dplane) in dy.chunks(oh * ow).enumerate() {
        for (u, &r) in rows.iter().enumerate() {
            for (v, &c) in cols.iter().enumerate() {
                dx[p * ip + r * in_shape.w + c] += dplane[u * ow + v];
            }
        }
    }
    dx
}

//! Average and max pooling over zero-padded windows.
//!
//! Average pooling always divides by the full window area (padding counts as
//! zeros), which keeps it a fixed linear map. Max pooling ignores padding.

use crate::error::{Error, Result};
use crate::kernels::conv::window_out;
use crate::tensor::{Real, Shape, Tensor};

/// Window placement for one pooling call. Trailing padding is implied by
/// the output extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn symmetric(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::config("pooling kernel and stride must be >= 1"));
        }
        if pad >= k {
            return Err(Error::config(format!(
                "pooling padding {pad} must be smaller than the kernel {k}"
            )));
        }
        let oh = window_out(h, k, stride, pad).ok_or(Error::Dimension {
            op: "pool2d",
            axis: "height",
            expected: k,
            got: h + 2 * pad,
        })?;
        let ow = window_out(w, k, stride, pad).ok_or(Error::Dimension {
            op: "pool2d",
            axis: "width",
            expected: k,
            got: w + 2 * pad,
        })?;
        Ok(PoolGeom {
            kh: k,
            kw: k,
            stride,
            pad_top: pad,
            pad_left: pad,
            oh,
            ow,
        })
    }

    /// One window covering the whole plane.
    pub fn global(h: usize, w: usize) -> Self {
        PoolGeom {
            kh: h,
            kw: w,
            stride: 1,
            pad_top: 0,
            pad_left: 0,
            oh: 1,
            ow: 1,
        }
    }

    #[inline]
    fn start(o: usize, stride: usize, pad: usize) -> isize {
        (o * stride) as isize - pad as isize
    }

    fn rows(&self, oy: usize, h: usize) -> std::ops::Range<usize> {
        clip(Self::start(oy, self.stride, self.pad_top), self.kh, h)
    }

    fn cols(&self, ox: usize, w: usize) -> std::ops::Range<usize> {
        clip(Self::start(ox, self.stride, self.pad_left), self.kw, w)
    }

    pub fn out_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n, x.c, self.oh, self.ow)
    }
}

fn clip(start: isize, k: usize, len: usize) -> std::ops::Range<usize> {
    let lo = start.max(0) as usize;
    let hi = (start + k as isize).clamp(0, len as isize) as usize;
    lo.min(hi)..hi
}

pub(crate) fn avg_pool_forward<T: Real>(x: &Tensor<T>, g: &PoolGeom) -> Tensor<T> {
    let s = x.shape();
    let area = T::from_usize(g.kh * g.kw).expect("window area");
    let out = g.out_shape(s);
    let xd = x.data();
    let mut y = Vec::with_capacity(out.numel());
    for plane in xd.chunks(s.plane().max(1)).take(s.n * s.c) {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for iy in g.rows(oy, s.h) {
                    for ix in g.cols(ox, s.w) {
                        acc += plane[iy * s.w + ix];
                    }
                }
                y.push(acc / area);
            }
        }
    }
    Tensor::from_parts(out, y)
}

pub(crate) fn avg_pool_backward<T: Real>(in_shape: Shape, g: &PoolGeom, dy: &[T]) -> Vec<T> {
    let area = T::from_usize(g.kh * g.kw).expect("window area");
    let mut dx = vec![T::zero(); in_shape.numel()];
    let (ip, op) = (in_shape.plane(), g.oh * g.ow);
    for (p, dplane) in dx.chunks_mut(ip.max(1)).take(in_shape.n * in_shape.c).enumerate() {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dy[p * op + oy * g.ow + ox] / area;
                for iy in g.rows(oy, in_shape.h) {
                    for ix in g.cols(ox, in_shape.w) {
                        dplane[iy * in_shape.w + ix] += d;
                    }
                }
            }
        }
    }
    dx
}

/// Returns the pooled tensor and, per output, the in-plane flat index of the
/// selected input (first maximum in row-major scan order).
pub(crate) fn max_pool_forward<T: Real>(x: &Tensor<T>, g: &PoolGeom) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let out = g.out_shape(s);
    let mut y = Vec::with_capacity(out.numel());
    let mut arg = Vec::with_capacity(out.numel());
    for plane in x.data().chunks(s.plane().max(1)).take(s.n * s.c) {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut at = usize::MAX;
                for iy in g.rows(oy, s.h) {
                    for ix in g.cols(ox, s.w) {
                        let v = plane[iy * s.w + ix];
                        if at == usize::MAX || v > best {
                            best = v;
                            at = iy * s.w + ix;
                        }
                    }
                }
                debug_assert!(at != usize::MAX, "max-pool window outside the grid");
                y.push(best);
                arg.push(at as u32);
            }
        }
    }
    (Tensor::from_parts(out, y), arg)
}

pub(crate) fn max_pool_backward<T: Real>(in_shape: Shape, argmax: &[u32], out_plane: usize, dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); in_shape.numel()];
    let ip = in_shape.plane();
    for (o, (&a, &d)) in argmax.iter().zip(dy).enumerate() {
        let p = o / out_plane.max(1);
        dx[p * ip + a as usize] += d;
    }
    dx
}

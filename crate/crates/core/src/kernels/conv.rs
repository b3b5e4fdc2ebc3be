//! Grouped 2-d convolution: im2col + GEMM for dense groups, direct loops for
//! depth-wise groups (one input and one output channel per group).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dSpec { stride, pad, groups }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 0, 1)
    }
}

/// Output extent of a zero-padded sliding window.
pub fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, w: Shape, bias: Option<Shape>, spec: Conv2dSpec) -> Result<Self> {
        let op = "conv2d";
        if spec.stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if spec.groups == 0 || !x.c.is_multiple_of(spec.groups) {
            return Err(Error::Dimension {
                op,
                axis: "input channels (not divisible by groups)",
                expected: spec.groups,
                got: x.c,
            });
        }
        if !w.n.is_multiple_of(spec.groups) {
            return Err(Error::Dimension {
                op,
                axis: "output channels (not divisible by groups)",
                expected: spec.groups,
                got: w.n,
            });
        }
        if w.c != x.c / spec.groups {
            return Err(Error::Dimension {
                op,
                axis: "weight input channels",
                expected: x.c / spec.groups,
                got: w.c,
            });
        }
        if w.h == 0 || w.w == 0 {
            return Err(Error::config("conv2d kernel must be at least 1x1"));
        }
        if let Some(b) = bias {
            if b.numel() != w.n {
                return Err(Error::Dimension {
                    op,
                    axis: "bias",
                    expected: w.n,
                    got: b.numel(),
                });
            }
        }
        let oh = window_out(x.h, w.h, spec.stride, spec.pad).ok_or(Error::Dimension {
            op,
            axis: "height",
            expected: w.h,
            got: x.h + 2 * spec.pad,
        })?;
        let ow = window_out(x.w, w.w, spec.stride, spec.pad).ok_or(Error::Dimension {
            op,
            axis: "width",
            expected: w.w,
            got: x.w + 2 * spec.pad,
        })?;
        Ok(ConvGeom {
            n: x.n,
            cin: x.c,
            h: x.h,
            w: x.w,
            cout: w.n,
            kh: w.h,
            kw: w.w,
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the grid.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    /// Outputs `o` whose tap `k` lands inside `0..len`, as a half-open range.
    #[inline]
    fn valid(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        // o·s + k − p ∈ [0, len)  ⇔  o ∈ [⌈(p − k)/s⌉, ⌈(len + p − k)/s⌉)
        let s = self.stride;
        let lo = (self.pad.saturating_sub(k)).div_ceil(s);
        let hi = (len + self.pad).saturating_sub(k).div_ceil(s);
        (lo.min(out), hi.clamp(lo.min(out), out))
    }

    /// Unfolds the channels of one group of one sample into a
    /// `(cin_g*kh*kw) × (oh*ow)` matrix.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let ohw = self.oh * self.ow;
        let s = self.stride;
        for ci in 0..self.cin_g() {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.valid(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.valid(kj, self.w, self.ow);
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ohw..(row + 1) * ohw];
                    dst[..ylo * self.ow].fill(T::zero());
                    dst[yhi * self.ow..].fill(T::zero());
                    if xlo == xhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    for oy in ylo..yhi {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let src = &plane[(oy * s + ki - self.pad) * self.w..][..self.w];
                        line[..xlo].fill(T::zero());
                        line[xhi..].fill(T::zero());
                        let first = xlo * s + kj - self.pad;
                        if s == 1 {
                            line[xlo..xhi].copy_from_slice(&src[first..first + xhi - xlo]);
                        } else {
                            for (slot, &v) in line[xlo..xhi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *slot = v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds a column matrix into `dx`.
    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let ohw = self.oh * self.ow;
        let s = self.stride;
        for ci in 0..self.cin_g() {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.valid(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.valid(kj, self.w, self.ow);
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * ohw..(row + 1) * ohw];
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let line = &src[oy * self.ow + xlo..oy * self.ow + xhi];
                        let first = xlo * s + kj - self.pad;
                        let dst = &mut plane[(oy * s + ki - self.pad) * self.w..][..self.w];
                        if s == 1 {
                            let dst = &mut dst[first..first + line.len()];
                            for (d, &v) in dst.iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[first..].iter_mut().step_by(s).zip(line) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn depthwise_plane<T: Real>(&self, x: &[T], k: &[T], bias: T, y: &mut [T]) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let mut acc = T::zero();
                for ki in 0..self.kh {
                    let Some(iy) = self.src(oy, ki, self.h) else {
                        continue;
                    };
                    for kj in 0..self.kw {
                        if let Some(ix) = self.src(ox, kj, self.w) {
                            acc += k[ki * self.kw + kj] * x[iy * self.w + ix];
                        }
                    }
                }
                y[oy * self.ow + ox] = acc + bias;
            }
        }
    }

    fn forward_sample<T: Real>(&self, x: &[T], w: &[T], b: Option<&[T]>, y: &mut [T]) {
        let hw = self.h * self.w;
        let ohw = self.oh * self.ow;
        let (cin_g, cout_g, rows) = (self.cin_g(), self.cout_g(), self.col_rows());
        if self.is_depthwise() {
            let kk = self.kh * self.kw;
            for c in 0..self.cout {
                let bias = b.map_or(T::zero(), |b| b[c]);
                self.depthwise_plane(
                    &x[c * hw..(c + 1) * hw],
                    &w[c * kk..(c + 1) * kk],
                    bias,
                    &mut y[c * ohw..(c + 1) * ohw],
                );
            }
            return;
        }
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ohw]
        };
        for g in 0..self.groups {
            let xg = &x[g * cin_g * hw..(g + 1) * cin_g * hw];
            let wg = &w[g * cout_g * rows..(g + 1) * cout_g * rows];
            let yg = &mut y[g * cout_g * ohw..(g + 1) * cout_g * ohw];
            let cols: &[T] = if self.is_pointwise() {
                xg
            } else {
                self.im2col(xg, &mut col);
                &col
            };
            gemm(false, false, cout_g, ohw, rows, wg, cols, T::zero(), yg);
            if let Some(b) = b {
                for (co, out) in yg.chunks_mut(ohw).enumerate() {
                    let bias = b[g * cout_g + co];
                    out.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<(Tensor<T>, ConvGeom)> {
    let geom = ConvGeom::new(x.shape(), w.shape(), b.map(|b| b.shape()), spec)?;
    let out_shape = geom.out_shape();
    let mut y = vec![T::zero(); out_shape.numel()];
    let in_item = x.shape().item();
    let out_item = out_shape.item();
    let (xd, wd, bd) = (x.data(), w.data(), b.map(|b| b.data()));
    if out_item > 0 {
        // Samples are independent, so splitting the batch across threads
        // leaves each output's summation order untouched.
        y.par_chunks_mut(out_item).enumerate().for_each(|(n, yn)| {
            geom.forward_sample(&xd[n * in_item..(n + 1) * in_item], wd, bd, yn);
        });
    }
    Ok((Tensor::from_parts(out_shape, y), geom))
}

/// `dst (cols × rows) = srcᵀ` for a row-major `rows × cols` source.
fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const R: usize = 8;
    let src = &src[..rows * cols];
    let dst = &mut dst[..rows * cols];
    let full = rows / R * R;
    for r in (0..full).step_by(R) {
        let band: [&[T]; R] = std::array::from_fn(|k| &src[(r + k) * cols..(r + k + 1) * cols]);
        for (c, out) in dst.chunks_exact_mut(rows).enumerate() {
            let out: &mut [T; R] = (&mut out[r..r + R]).try_into().expect("R wide");
            for k in 0..R {
                out[k] = band[k][c];
            }
        }
    }
    for r in full..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let g = geom;
    let hw = g.h * g.w;
    let ohw = g.oh * g.ow;
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let in_item = g.cin * hw;
    let out_item = g.cout * ohw;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_item]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * rows]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (c, slot) in db.iter_mut().enumerate() {
                let start = n * out_item + c * ohw;
                *slot += dy[start..start + ohw].iter().copied().sum::<T>();
            }
        }
        db
    });

    if g.is_depthwise() {
        let kk = g.kh * g.kw;
        for n in 0..g.n {
            for c in 0..g.cout {
                let xp = &x[n * in_item + c * hw..n * in_item + (c + 1) * hw];
                let dyp = &dy[n * out_item + c * ohw..n * out_item + (c + 1) * ohw];
                let kern = &w[c * kk..(c + 1) * kk];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let d = dyp[oy * g.ow + ox];
                        for ki in 0..g.kh {
                            let Some(iy) = g.src(oy, ki, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(ix) = g.src(ox, kj, g.w) else {
                                    continue;
                                };
                                if let Some(dw) = dw.as_mut() {
                                    dw[c * kk + ki * g.kw + kj] += d * xp[iy * g.w + ix];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[n * in_item + c * hw + iy * g.w + ix] += d * kern[ki * g.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        return ConvGrads { dx, dw, db };
    }

    let mut col = vec![T::zero(); rows * ohw];
    let mut col_t = vec![T::zero(); rows * ohw];
    let mut dcol = vec![T::zero(); rows * ohw];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xg = &x[n * in_item + grp * cin_g * hw..n * in_item + (grp + 1) * cin_g * hw];
            let dyg = &dy[n * out_item + grp * cout_g * ohw..n * out_item + (grp + 1) * cout_g * ohw];
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    g.im2col(xg, &mut col);
                    &col
                };
                let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                // A row-major right operand packs far faster than a strided one.
                transpose_into(cols, rows, ohw, &mut col_t);
                gemm(false, false, cout_g, rows, ohw, dyg, &col_t, T::one(), dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let dxg = &mut dx[n * in_item + grp * cin_g * hw..n * in_item + (grp + 1) * cin_g * hw];
                if g.is_pointwise() {
                    gemm(true, false, rows, ohw, cout_g, wg, dyg, T::one(), dxg);
                } else {
                    gemm(true, false, rows, ohw, cout_g, wg, dyg, T::zero(), &mut dcol);
                    g.col2im(&dcol, dxg);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: Conv2dSpec) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * s.pad - ws.h) / s.stride + 1;
        let ow = (xs.w + 2 * s.pad - ws.w) / s.stride + 1;
        let cin_g = xs.c / s.groups;
        let cout_g = ws.n / s.groups;
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, oy, ox| {
            let grp = co / cout_g;
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..cin_g {
                for ki in 0..ws.h {
                    for kj in 0..ws.w {
                        let iy = (oy * s.stride + ki) as isize - s.pad as isize;
                        let ix = (ox * s.stride + kj) as isize - s.pad as isize;
                        if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                            continue;
                        }
                        acc += w.at(co, ci, ki, kj) * x.at(n, grp * cin_g + ci, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_three_by_three_is_nine() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let (y, _) = conv2d_forward(&x, &w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn grouped_stride_two_shape() {
        let x = Tensor::<f32>::ones(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::ones(Shape::new(2, 1, 3, 3));
        let (y, _) = conv2d_forward(&x, &w, None, Conv2dSpec::new(2, 1, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 2));
    }

    #[test]
    fn matches_naive_oracle_across_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // (x shape, w shape, spec): depth-wise, dense, grouped, pointwise, strided.
        let cases = [
            (Shape::new(1, 4, 5, 5), Shape::new(4, 1, 3, 3), Conv2dSpec::new(1, 1, 4)),
            (Shape::new(2, 3, 6, 7), Shape::new(5, 3, 3, 3), Conv2dSpec::new(1, 1, 1)),
            (Shape::new(2, 4, 7, 7), Shape::new(6, 2, 3, 3), Conv2dSpec::new(2, 1, 2)),
            (Shape::new(2, 6, 4, 4), Shape::new(3, 6, 1, 1), Conv2dSpec::new(1, 0, 1)),
            (Shape::new(1, 2, 9, 9), Shape::new(4, 2, 1, 1), Conv2dSpec::new(2, 0, 1)),
            (Shape::new(2, 3, 7, 7), Shape::new(3, 1, 7, 7), Conv2dSpec::new(1, 0, 3)),
            (Shape::new(1, 3, 9, 8), Shape::new(4, 3, 7, 7), Conv2dSpec::new(2, 3, 1)),
            (Shape::new(1, 2, 4, 5), Shape::new(3, 2, 5, 5), Conv2dSpec::new(3, 2, 1)),
            (Shape::new(1, 2, 2, 2), Shape::new(2, 2, 3, 3), Conv2dSpec::new(1, 4, 1)),
        ];
        for (xs, ws, spec) in cases {
            let x = random(xs, &mut rng);
            let w = random(ws, &mut rng);
            let b = random(Shape::new(1, ws.n, 1, 1), &mut rng);
            let (y, _) = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
            let want = naive(&x, &w, Some(&b), spec);
            assert_eq!(y.shape(), want.shape());
            for (a, e) in y.data().iter().zip(want.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn depthwise_random_f32_within_relative_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape::new(1, 4, 5, 5), &mut rng);
        let w = random(Shape::new(4, 1, 3, 3), &mut rng);
        let spec = Conv2dSpec::new(1, 0, 4);
        let want = naive(&x, &w, None, spec);
        let (y, _) = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), None, spec).unwrap();
        for (a, e) in y.data().iter().zip(want.data()) {
            assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1e-3));
        }
    }

    #[test]
    fn global_depthwise_is_per_channel_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(2, 3, 4, 4), &mut rng);
        let w = random(Shape::new(3, 1, 4, 4), &mut rng);
        let (y, _) = conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 0, 3)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        acc += x.at(n, c, i, j) * w.at(c, 0, i, j);
                    }
                }
                assert!((y.at(n, c, 0, 0) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_channels_name_the_axis() {
        let x = Tensor::<f32>::ones(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::ones(Shape::new(2, 2, 3, 3));
        let err = conv2d_forward(&x, &w, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("weight input channels"), "{err}");
        let w = Tensor::<f32>::ones(Shape::new(2, 3, 5, 5));
        let err = conv2d_forward(&x, &w, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn col2im_is_adjoint_of_im2col(
            h in 1usize..9, w in 1usize..9, k in 1usize..6, stride in 1usize..4, pad in 0usize..4, seed in 0u64..1000,
        ) {
            let xs = Shape::new(1, 2, h, w);
            let ws = Shape::new(3, 2, k, k);
            let Ok(g) = ConvGeom::new(xs, ws, None, Conv2dSpec::new(stride, pad, 1)) else {
                return Ok(());
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(xs, &mut rng);
            let c = random(Shape::new(1, 1, g.col_rows(), g.oh * g.ow), &mut rng);
            let mut col = vec![0.0; g.col_rows() * g.oh * g.ow];
            g.im2col(x.data(), &mut col);
            let mut back = vec![0.0; xs.numel()];
            g.col2im(c.data(), &mut back);
            let lhs: f64 = col.iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
    }
}

//! Raw slice kernels behind the differentiable ops. Shapes are validated by
//! the caller; everything here assumes consistent geometry.

use crate::element::Element;

/// Stride, dilation and zero padding of a 2-D convolution, as (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }
}

impl Conv2dSpec {
    /// Stride-1 padding that keeps the spatial size for an odd kernel.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        Conv2dSpec {
            stride: (1, 1),
            dilation,
            padding: (
                dilation.0 * (kernel.0 - 1) / 2,
                dilation.1 * (kernel.1 - 1) / 2,
            ),
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            dilation: (1, 1),
            padding: (padding, padding),
        }
    }

    /// Output extent along one axis, or `None` when the dilated kernel does
    /// not fit inside the padded input.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if span > padded || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        Some((
            Self::out_extent(h, kh, self.stride.0, self.dilation.0, self.padding.0)?,
            Self::out_extent(w, kw, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1 stride-1 unpadded convolution reads the input directly as its
    /// column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec == Conv2dSpec::default()
    }

    /// Valid output-column range `[lo, hi)` whose input column
    /// `ox*stride + offset` lies inside `[0, w)`.
    fn col_range(&self, offset: isize) -> (usize, usize) {
        let sw = self.spec.stride.1 as isize;
        let w = self.w as isize;
        let mut lo = 0isize;
        if offset < 0 {
            lo = (-offset + sw - 1) / sw;
        }
        let hi = if w - offset <= 0 {
            0
        } else {
            ((w - offset + sw - 1) / sw).min(self.wo as isize)
        };
        let lo = lo.min(self.wo as isize) as usize;
        (lo, (hi as usize).max(lo))
    }
}

/// Fills `cols` (`k × p`, every element written) with the receptive
/// fields of `x`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    let (sh, sw) = g.spec.stride;
    let (dh, dw) = g.spec.dilation;
    let (ph, pw) = g.spec.padding;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let off = (kj * dw) as isize - pw as isize;
                let (lo, hi) = g.col_range(off);
                for oy in 0..g.ho {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if hi == lo {
                        continue;
                    }
                    if sw == 1 {
                        let start = (lo as isize + off) as usize;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[(ox as isize * sw as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    let (sh, sw) = g.spec.stride;
    let (dh, dw) = g.spec.dilation;
    let (ph, pw) = g.spec.padding;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let off = (kj * dw) as isize - pw as isize;
                let (lo, hi) = g.col_range(off);
                for oy in 0..g.ho {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    if hi == lo {
                        continue;
                    }
                    if sw == 1 {
                        let start = (lo as isize + off) as usize;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[(ox as isize * sw as isize + off) as usize] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.o * p];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(p).zip(b) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(g.o, k, p, T::one(), w, (k as isize, 1), x, (p as isize, 1), beta, &mut out, (p as isize, 1));
    } else {
        T::with_scratch(k * p, |cols| {
            im2col(x, g, cols);
            T::gemm(g.o, k, p, T::one(), w, (k as isize, 1), cols, (p as isize, 1), beta, &mut out, (p as isize, 1));
        });
    }
    out
}

/// Returns (dx, dw, dbias).
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let db = need_db.then(|| {
        dy.chunks(p)
            .map(|row| row.iter().copied().sum::<T>())
            .collect::<Vec<T>>()
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.o * k];
        // dW[o,k] = dY[o,p] · cols[k,p]^T
        let grad = |cols: &[T], dw: &mut [T]| {
            T::gemm(g.o, p, k, T::one(), dy, (p as isize, 1), cols, (1, p as isize), T::zero(), dw, (k as isize, 1))
        };
        if g.is_pointwise() {
            grad(x, &mut dw);
        } else {
            T::with_scratch(k * p, |cols| {
                im2col(x, g, cols);
                grad(cols, &mut dw);
            });
        }
        dw
    });
    let dx = need_dx.then(|| {
        // dcols[k,p] = W[o,k]^T · dY[o,p]
        let dcols = |out: &mut [T]| {
            T::gemm(k, g.o, p, T::one(), w, (1, k as isize), dy, (p as isize, 1), T::zero(), out, (p as isize, 1))
        };
        if g.is_pointwise() {
            let mut out = vec![T::zero(); k * p];
            dcols(&mut out);
            out
        } else {
            let mut dx = vec![T::zero(); g.c * g.h * g.w];
            T::with_scratch(k * p, |cols| {
                dcols(cols);
                col2im(cols, g, &mut dx);
            });
            dx
        }
    });
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Window and stride of a pooling op, as (rows, cols). Trailing partial
/// windows are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dSpec {
    pub mode: PoolMode,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl Pool2dSpec {
    pub fn max(window: usize) -> Self {
        Pool2dSpec {
            mode: PoolMode::Max,
            window: (window, window),
            stride: (window, window),
        }
    }

    pub fn avg(window: usize) -> Self {
        Pool2dSpec {
            mode: PoolMode::Avg,
            window: (window, window),
            stride: (window, window),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.window.0 > h || self.window.1 > w || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some((
            (h - self.window.0) / self.stride.0 + 1,
            (w - self.window.1) / self.stride.1 + 1,
        ))
    }
}

/// Returns pooled values and, for max mode, the flat input index that won
/// each window (first index on ties).
pub(crate) fn pool2d_forward<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &Pool2dSpec,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::new();
    let (wh, ww) = spec.window;
    let inv = T::one() / T::of((wh * ww) as f64);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, x0) = (oy * spec.stride.0, ox * spec.stride.1);
                match spec.mode {
                    PoolMode::Max => {
                        let mut best = base + y0 * w + x0;
                        for iy in y0..y0 + wh {
                            for ix in x0..x0 + ww {
                                let idx = base + iy * w + ix;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        arg.push(best);
                    }
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for iy in y0..y0 + wh {
                            for &v in &x[base + iy * w + x0..base + iy * w + x0 + ww] {
                                acc += v;
                            }
                        }
                        out.push(acc * inv);
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for iy in 0..h {
            let src = &x[(ch * h + iy) * w..(ch * h + iy + 1) * w];
            let row = &mut out[(ch * h2 + 2 * iy) * w2..(ch * h2 + 2 * iy + 1) * w2];
            for (ix, &v) in src.iter().enumerate() {
                row[2 * ix] = v;
                row[2 * ix + 1] = v;
            }
            let (a, b) = out.split_at_mut((ch * h2 + 2 * iy + 1) * w2);
            b[..w2].copy_from_slice(&a[(ch * h2 + 2 * iy) * w2..]);
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..h2 {
            let row = &dy[(ch * h2 + oy) * w2..(ch * h2 + oy + 1) * w2];
            let dst = &mut dx[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
            for (ix, d) in dst.iter_mut().enumerate() {
                *d += row[2 * ix] + row[2 * ix + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.o * g.p()];
        for o in 0..g.o {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.spec.stride.0 + ki * g.spec.dilation.0) as isize
                                    - g.spec.padding.0 as isize;
                                let ix = (ox * g.spec.stride.1 + kj * g.spec.dilation.1) as isize
                                    - g.spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let cases = [
            (2, 7, 9, 3, 3, 3, Conv2dSpec::same((3, 3), (2, 1))),
            (1, 8, 8, 2, 3, 3, Conv2dSpec::strided(2, 1)),
            (3, 5, 11, 2, 3, 1, Conv2dSpec { stride: (1, 3), dilation: (1, 1), padding: (1, 2) }),
            (2, 9, 9, 1, 3, 3, Conv2dSpec::same((3, 3), (4, 4))),
        ];
        for (c, h, w, o, kh, kw, spec) in cases {
            let (ho, wo) = spec.output_hw(h, w, kh, kw).unwrap();
            let g = ConvGeom { c, h, w, o, kh, kw, ho, wo, spec };
            let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..o * c * kh * kw).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            assert_eq!(conv2d_forward(&x, &wt, None, &g), naive_conv(&x, &wt, &g));
        }
    }

    #[test]
    fn output_extent_formula() {
        // floor((H + 2p - d(k-1) - 1)/s) + 1
        assert_eq!(Conv2dSpec::out_extent(10, 3, 1, 1, 0), Some(8));
        assert_eq!(Conv2dSpec::out_extent(10, 3, 2, 1, 1), Some(5));
        assert_eq!(Conv2dSpec::out_extent(10, 3, 1, 2, 2), Some(10));
        assert_eq!(Conv2dSpec::out_extent(4, 3, 1, 4, 0), None);
    }

    #[test]
    fn pool_floor_semantics() {
        let spec = Pool2dSpec::max(2);
        assert_eq!(spec.output_hw(5, 4), Some((2, 2)));
        assert_eq!(spec.output_hw(1, 4), None);
    }
}

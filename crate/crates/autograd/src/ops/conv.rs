//! 2-D convolution via im2col + gemm.

use crate::array::Array;
use crate::graph::Var;
use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, col: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < w
                        let lo = g.pad.saturating_sub(kj).min(g.ow);
                        let hi = ((g.w + g.pad).saturating_sub(kj)).min(g.ow).max(lo);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kj - g.pad;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.ow);
                        let hi = ((g.w + g.pad).saturating_sub(kj)).min(g.ow).max(lo);
                        if hi > lo {
                            let d0 = lo + kj - g.pad;
                            for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Convolution of `[N, C, H, W]` by `[O, C, KH, KW]` with symmetric zero
    /// padding and optional per-output-channel bias.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCKK, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let geom = Geom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let in_sz = c * h * wd;
        let mut out = vec![T::zero(); n * o * p];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for i in 0..n {
            let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
            let colref: &[T] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut col);
                &col
            };
            gemm(o, rows, p, w.data(), false, colref, false, T::zero(), &mut out[i * o * p..(i + 1) * o * p]);
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[o], "conv2d bias shape");
            for i in 0..n {
                for oc in 0..o {
                    let bval = bv.data()[oc];
                    for v in &mut out[(i * o + oc) * p..(i * o + oc + 1) * p] {
                        *v += bval;
                    }
                }
            }
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        let out_shape = [n, o, geom.oh, geom.ow];
        self.graph.op(
            Array::from_vec(&out_shape, out),
            &parents,
            Box::new(move |g, _, needs| {
                let gd = g.data();
                let mut gx = needs[0].then(|| vec![T::zero(); n * in_sz]);
                let mut gw = needs[1].then(|| vec![T::zero(); o * rows]);
                let mut dcol = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * p }];
                let mut col = vec![T::zero(); if geom.is_pointwise() || gw.is_none() { 0 } else { rows * p }];
                for i in 0..n {
                    let gi = &gd[i * o * p..(i + 1) * o * p];
                    if let Some(gw) = gw.as_mut() {
                        let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
                        let colref: &[T] = if geom.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, &geom, &mut col);
                            &col
                        };
                        let beta = if i == 0 { T::zero() } else { T::one() };
                        gemm(o, p, rows, gi, false, colref, true, beta, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dxi = &mut gx[i * in_sz..(i + 1) * in_sz];
                        if geom.is_pointwise() {
                            gemm(rows, o, p, w.data(), true, gi, false, T::zero(), dxi);
                        } else {
                            gemm(rows, o, p, w.data(), true, gi, false, T::zero(), &mut dcol);
                            col2im(&dcol, &geom, dxi);
                        }
                    }
                }
                let mut res = vec![
                    gx.map(|v| Array::from_vec(&[n, geom.c, geom.h, geom.w], v)),
                    gw.map(|v| Array::from_vec(&[o, geom.c, geom.kh, geom.kw], v)),
                ];
                if has_bias {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); o];
                        for i in 0..n {
                            for (oc, b) in gb.iter_mut().enumerate() {
                                *b += gd[(i * o + oc) * p..(i * o + oc + 1) * p].iter().copied().sum();
                            }
                        }
                        Array::from_vec(&[o], gb)
                    }));
                }
                res
            }),
        )
    }
}

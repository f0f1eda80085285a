use crate::array::{numel, Array};
use crate::graph::Var;
use crate::scalar::Scalar;

/// (outer, axis, inner) factorisation of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let src = x.shape().to_vec();
        if src == shape {
            return self;
        }
        let out = (*x).clone().reshape(shape);
        self.graph.op(out, &[self.id], Box::new(move |g, _, _| vec![Some(g.clone().reshape(&src))]))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let out = x.permute(axes);
        let inv = inverse_perm(axes);
        self.graph.op(out, &[self.id], Box::new(move |g, _, _| vec![Some(g.permute(&inv))]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow {start}+{len} out of {:?} axis {axis}", shape);
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.op(
            Array::from_vec(&out_shape, out),
            &[self.id],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Array::from_vec(&shape, gx))]
            }),
        )
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let sizes: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || a == b, "concat dim {d} mismatch: {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.op(
            Array::from_vec(&out_shape, out),
            &ids,
            Box::new(move |g, _, needs| {
                let mut grads: Vec<Option<Vec<T>>> =
                    shapes.iter().zip(needs).map(|(s, &n)| n.then(|| Vec::with_capacity(numel(s)))).collect();
                let gd = g.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (gr, &s) in grads.iter_mut().zip(&sizes) {
                        if let Some(v) = gr {
                            v.extend_from_slice(&gd[off..off + s * inner]);
                        }
                        off += s * inner;
                    }
                }
                grads.into_iter().zip(&shapes).map(|(v, s)| v.map(|v| Array::from_vec(s, v))).collect()
            }),
        )
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let nd = shape.len();
        assert!(nd >= 2, "upsample needs rank >= 2");
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let planes: usize = shape[..nd - 2].iter().product();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); planes * oh * ow];
        let xd = x.data();
        for p in 0..planes {
            for i in 0..oh {
                let src_row = &xd[(p * h + i / factor) * w..];
                let dst = &mut out[(p * oh + i) * ow..(p * oh + i + 1) * ow];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src_row[j / factor];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        self.graph.op(
            Array::from_vec(&out_shape, out),
            &[self.id],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); planes * h * w];
                let gd = g.data();
                for p in 0..planes {
                    for i in 0..oh {
                        let row = &gd[(p * oh + i) * ow..(p * oh + i + 1) * ow];
                        let dst = &mut gx[(p * h + i / factor) * w..(p * h + i / factor + 1) * w];
                        for (j, &v) in row.iter().enumerate() {
                            dst[j / factor] += v;
                        }
                    }
                }
                vec![Some(Array::from_vec(&shape, gx))]
            }),
        )
    }

    /// Gather rows of the first axis.
    pub fn index_select(self, indices: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < shape[0], "index {i} out of range {}", shape[0]);
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        self.graph.op(
            Array::from_vec(&out_shape, out),
            &[self.id],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); numel(&shape)];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &s) in gx[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                        *d += s;
                    }
                }
                vec![Some(Array::from_vec(&shape, gx))]
            }),
        )
    }

    /// Zero padding of `axis` by `before`/`after` entries.
    pub fn pad_axis(self, axis: usize, before: usize, after: usize) -> Var<'g, T> {
        let shape = self.shape();
        let mut parts = Vec::with_capacity(3);
        if before > 0 {
            let mut s = shape.clone();
            s[axis] = before;
            parts.push(self.graph.constant(Array::zeros(&s)));
        }
        parts.push(self);
        if after > 0 {
            let mut s = shape.clone();
            s[axis] = after;
            parts.push(self.graph.constant(Array::zeros(&s)));
        }
        if parts.len() == 1 {
            return self;
        }
        Var::concat(&parts, axis)
    }
}

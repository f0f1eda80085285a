use crate::array::Array;
use crate::graph::Var;
use crate::scalar::{gemm, Scalar};

/// Shapes of a (possibly transposed) batched matmul operand.
fn mat_dims(shape: &[usize], trans: bool) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "matmul operand needs rank >= 2, got {shape:?}");
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    let batch: usize = shape[..shape.len() - 2].iter().product();
    if trans {
        (batch, c, r)
    } else {
        (batch, r, c)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Batched `op(a) @ op(b)`. `b` may be rank 2 and shared across the batch.
    pub fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let (ba, m, k) = mat_dims(a.shape(), ta);
        let (bb, k2, n) = mat_dims(b.shape(), tb);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let shared_b = b.ndim() == 2;
        if !shared_b {
            assert_eq!(ba, bb, "matmul batch dims {:?} x {:?}", a.shape(), b.shape());
        }
        let mut out_shape = a.shape()[..a.ndim() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![T::zero(); ba * m * n];
        let (sa, sb, sc) = (m * k, if shared_b { 0 } else { k * n }, m * n);
        for i in 0..ba {
            gemm(m, k, n, &a.data()[i * sa..], ta, &b.data()[i * sb..], tb, T::zero(), &mut out[i * sc..(i + 1) * sc]);
        }
        self.graph.op(
            Array::from_vec(&out_shape, out),
            &[self.id, other.id],
            Box::new(move |g, _, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut da = vec![T::zero(); ba * m * k];
                    for i in 0..ba {
                        let gi = &gd[i * sc..];
                        let bi = &b.data()[i * sb..];
                        let dai = &mut da[i * sa..(i + 1) * sa];
                        if ta {
                            // stored k×m: B' (k×n) @ G^T (n×m)
                            gemm(k, n, m, bi, tb, gi, true, T::zero(), dai);
                        } else {
                            // G (m×n) @ B'^T (n×k)
                            gemm(m, n, k, gi, false, bi, !tb, T::zero(), dai);
                        }
                    }
                    Array::from_vec(a.shape(), da)
                });
                let gb = needs[1].then(|| {
                    let mut db = vec![T::zero(); if shared_b { k * n } else { bb * k * n }];
                    for i in 0..ba {
                        let gi = &gd[i * sc..];
                        let ai = &a.data()[i * sa..];
                        let off = if shared_b { 0 } else { i * k * n };
                        let beta = if shared_b && i > 0 { T::one() } else { T::zero() };
                        let dbi = &mut db[off..off + k * n];
                        if tb {
                            // stored n×k: G^T (n×m) @ A' (m×k)
                            gemm(n, m, k, gi, true, ai, ta, beta, dbi);
                        } else {
                            // A'^T (k×m) @ G (m×n)
                            gemm(k, m, n, ai, !ta, gi, false, beta, dbi);
                        }
                    }
                    Array::from_vec(b.shape(), db)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(other, false, false)
    }

    /// `x @ w^T + b` over the last axis; `w` is stored `[out, in]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let shape = self.shape();
        let inp = *shape.last().expect("linear on scalar");
        let rows = shape.iter().product::<usize>() / inp.max(1);
        let out_f = w.shape()[0];
        let y = self.reshape(&[rows, inp]).matmul_t(w, false, true);
        let y = match b {
            Some(b) => y.add(b),
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_f;
        y.reshape(&out_shape)
    }
}

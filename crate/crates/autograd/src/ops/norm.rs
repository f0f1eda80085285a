use crate::array::Array;
use crate::graph::Var;
use crate::ops::elementwise::sigmoid;
use crate::scalar::Scalar;

/// Per-group standardised values and reciprocal standard deviations.
struct Normalized<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn normalize<T: Scalar>(x: &[T], rows: usize, len: usize, eps: T) -> Normalized<T> {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_len = T::one() / T::from_f64(len as f64);
    for r in 0..rows {
        let seg = &x[r * len..(r + 1) * len];
        let mean = seg.iter().copied().sum::<T>() * inv_len;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (d, &v) in xhat[r * len..(r + 1) * len].iter_mut().zip(seg) {
            *d = (v - mean) * rs;
        }
    }
    Normalized { xhat, rstd }
}

/// dx for y = xhat given dxhat, per group.
fn normalize_backward<T: Scalar>(dxhat: &[T], xhat: &[T], rstd: &[T], rows: usize, len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let inv_len = T::one() / T::from_f64(len as f64);
    for r in 0..rows {
        let dh = &dxhat[r * len..(r + 1) * len];
        let xh = &xhat[r * len..(r + 1) * len];
        let s1: T = dh.iter().copied().sum();
        let s2: T = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dx[r * len..(r + 1) * len].iter_mut().zip(dh).zip(xh) {
            *d = rstd[r] * (a - (s1 + b * s2) * inv_len);
        }
    }
    dx
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Group normalisation of `[N, C, ...]` with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "group_norm needs [N, C, ...]");
        let (n, c) = (shape[0], shape[1]);
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let spatial: usize = shape[2..].iter().product();
        let len = c / groups * spatial;
        let rows = n * groups;
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[c], "group_norm gamma shape");
        let norm = normalize(x.data(), rows, len, T::from_f64(eps));
        let mut y = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                let (gm, bt) = (gv.data()[ch], bv.data()[ch]);
                for (d, &h) in y[off..off + spatial].iter_mut().zip(&norm.xhat[off..off + spatial]) {
                    *d = h * gm + bt;
                }
            }
        }
        self.graph.op(
            Array::from_vec(&shape, y),
            &[self.id, gamma.id, beta.id],
            Box::new(move |g, _, needs| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); gd.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * spatial;
                        let gm = gv.data()[ch];
                        for k in off..off + spatial {
                            dgamma[ch] += gd[k] * norm.xhat[k];
                            dbeta[ch] += gd[k];
                            dxhat[k] = gd[k] * gm;
                        }
                    }
                }
                vec![
                    needs[0].then(|| {
                        Array::from_vec(&shape, normalize_backward(&dxhat, &norm.xhat, &norm.rstd, rows, len))
                    }),
                    needs[1].then(|| Array::from_vec(&[c], dgamma)),
                    needs[2].then(|| Array::from_vec(&[c], dbeta)),
                ]
            }),
        )
    }

    /// Layer normalisation over the last axis with affine.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let len = *shape.last().expect("layer_norm on scalar");
        let rows = x.len() / len;
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[len], "layer_norm gamma shape");
        let norm = normalize(x.data(), rows, len, T::from_f64(eps));
        let y: Vec<T> = norm
            .xhat
            .iter()
            .enumerate()
            .map(|(k, &h)| h * gv.data()[k % len] + bv.data()[k % len])
            .collect();
        self.graph.op(
            Array::from_vec(&shape, y),
            &[self.id, gamma.id, beta.id],
            Box::new(move |g, _, needs| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); len];
                let mut dbeta = vec![T::zero(); len];
                let mut dxhat = vec![T::zero(); gd.len()];
                for k in 0..gd.len() {
                    let j = k % len;
                    dgamma[j] += gd[k] * norm.xhat[k];
                    dbeta[j] += gd[k];
                    dxhat[k] = gd[k] * gv.data()[j];
                }
                vec![
                    needs[0].then(|| {
                        Array::from_vec(&shape, normalize_backward(&dxhat, &norm.xhat, &norm.rstd, rows, len))
                    }),
                    needs[1].then(|| Array::from_vec(&[len], dgamma)),
                    needs[2].then(|| Array::from_vec(&[len], dbeta)),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let len = *shape.last().expect("softmax on scalar");
        let mut y = vec![T::zero(); x.len()];
        for (src, dst) in x.data().chunks(len).zip(y.chunks_mut(len)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / s;
            }
        }
        self.graph.op(
            Array::from_vec(&shape, y),
            &[self.id],
            Box::new(move |g, y, _| {
                let mut dx = vec![T::zero(); y.len()];
                for ((gy, yy), d) in g.data().chunks(len).zip(y.data().chunks(len)).zip(dx.chunks_mut(len)) {
                    let dot: T = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                    for ((d, &a), &b) in d.iter_mut().zip(gy).zip(yy) {
                        *d = b * (a - dot);
                    }
                }
                vec![Some(Array::from_vec(&shape, dx))]
            }),
        )
    }

    /// Mean binary cross-entropy of logits `self` against constant targets in [0, 1].
    pub fn bce_with_logits_mean(self, targets: &Array<T>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "bce target shape");
        let n = T::from_f64(x.len() as f64);
        let loss: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &z)| l.max(T::zero()) - l * z + (T::one() + (-l.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let tg = targets.clone();
        self.graph.op(
            Array::scalar(loss),
            &[self.id],
            Box::new(move |g, _, _| {
                let s = g.data()[0] / n;
                let dx = x.data().iter().zip(tg.data()).map(|(&l, &z)| (sigmoid(l) - z) * s).collect();
                vec![Some(Array::from_vec(x.shape(), dx))]
            }),
        )
    }

    /// Mean squared error against another var.
    pub fn mse(self, other: Var<'g, T>) -> Var<'g, T> {
        (self - other).sqr().mean_all()
    }
}

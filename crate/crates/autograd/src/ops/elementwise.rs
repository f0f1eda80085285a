use crate::array::{numel, strides_of, Array};
use crate::graph::Var;
use crate::scalar::Scalar;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

/// Strides of `shape` seen from a broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = strides_of(shape);
    (0..nd)
        .map(|i| {
            if i + shape.len() < nd {
                0
            } else {
                let j = i + shape.len() - nd;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

pub fn broadcast_binary<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Array::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let ad = a.data();
    let bd = b.data();
    walk2(&out_shape, &sa, &sb, |oa, ob| out.push(f(ad[oa], bd[ob])));
    Array::from_vec(&out_shape, out)
}

/// Odometer over `shape` carrying two strided offsets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    if numel(shape) == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0);
        return;
    }
    let last = nd - 1;
    let inner = shape[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(pa, pb);
            pa += ia;
            pb += ib;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to<T: Scalar>(a: &Array<T>, shape: &[usize]) -> Array<T> {
    if a.shape() == shape {
        return a.clone();
    }
    let zeros = Array::zeros(shape);
    let out = broadcast_binary(&zeros, a, |_, y| y);
    assert_eq!(out.shape(), shape, "cannot broadcast {:?} to {shape:?}", a.shape());
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(&Array<T>, &Array<T>, &Array<T>, &[bool]) -> (Option<Array<T>>, Option<Array<T>>) + 'static,
    ) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let out = broadcast_binary(&a, &b, f);
        self.graph.op(
            out,
            &[self.id, other.id],
            Box::new(move |g, _, needs| {
                let (ga, gb) = grads(g, &a, &b, needs);
                vec![ga.map(|x| x.sum_to_shape(a.shape())), gb.map(|x| x.sum_to_shape(b.shape()))]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x + y, |g, _, _, needs| {
            (needs[0].then(|| g.clone()), needs[1].then(|| g.clone()))
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x - y, |g, _, _, needs| {
            (needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v)))
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x * y, |g, a, b, needs| {
            (
                needs[0].then(|| broadcast_binary(g, b, |u, v| u * v)),
                needs[1].then(|| broadcast_binary(g, a, |u, v| u * v)),
            )
        })
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x / y, |g, a, b, needs| {
            (
                needs[0].then(|| broadcast_binary(g, b, |u, v| u / v)),
                needs[1].then(|| {
                    let ab = broadcast_binary(a, b, |x, y| -x / (y * y));
                    broadcast_binary(g, &ab, |u, v| u * v)
                }),
            )
        })
    }

    /// Elementwise map with derivative `df(x, y)` given input and output.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        self.graph.op(
            y,
            &[self.id],
            Box::new(move |g, y, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Array::from_vec(x.shape(), data))]
            }),
        )
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn sqr(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'g, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(
            Array::scalar(x.sum()),
            &[self.id],
            Box::new(move |g, _, _| vec![Some(Array::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum_all().scale(T::one() / T::from_f64(n as f64))
    }

    /// Sum-reduce to a broadcast-compatible smaller shape.
    pub fn sum_to(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let src = x.shape().to_vec();
        self.graph.op(x.sum_to_shape(shape), &[self.id], Box::new(move |g, _, _| vec![Some(broadcast_to(g, &src))]))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let src = x.shape().to_vec();
        self.graph.op(broadcast_to(&x, shape), &[self.id], Box::new(move |g, _, _| vec![Some(g.sum_to_shape(&src))]))
    }

    /// Mean over the given axes, keeping them as size-1 dims.
    pub fn mean_axes_keep(self, axes: &[usize]) -> Var<'g, T> {
        let mut shape = self.shape();
        let mut count = 1usize;
        for &a in axes {
            count *= shape[a];
            shape[a] = 1;
        }
        self.sum_to(&shape).scale(T::one() / T::from_f64(count as f64))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'g, T: Scalar> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

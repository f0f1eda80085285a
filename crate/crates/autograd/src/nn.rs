//! Parameterised layers. A layer only stores its parameter names and
//! hyper-parameters; values live in a [`ParamStore`].

use rand::Rng;

use crate::array::Array;
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::store::{Ctx, ParamStore};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Self { name: name.into(), fin, fout, bias: true }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R, zero: bool) {
        let w = if zero {
            Array::zeros(&[self.fout, self.fin])
        } else {
            uniform_init(rng, &[self.fout, self.fin], self.fin)
        };
        store.insert(format!("{}.weight", self.name), w);
        if self.bias {
            let b = if zero { Array::zeros(&[self.fout]) } else { uniform_init(rng, &[self.fout], self.fin) };
            store.insert(format!("{}.bias", self.name), b);
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = ctx.param(&format!("{}.weight", self.name));
        let b = self.bias.then(|| ctx.param(&format!("{}.bias", self.name)));
        x.linear(w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `kernel`×`kernel` convolution with "same" padding at stride 1.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R, zero: bool) {
        let fan_in = self.cin * self.kernel * self.kernel;
        let shape = [self.cout, self.cin, self.kernel, self.kernel];
        let (w, b) = if zero {
            (Array::zeros(&shape), Array::zeros(&[self.cout]))
        } else {
            (uniform_init(rng, &shape, fan_in), uniform_init(rng, &[self.cout], fan_in))
        };
        store.insert(format!("{}.weight", self.name), w);
        store.insert(format!("{}.bias", self.name), b);
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = ctx.param(&format!("{}.weight", self.name));
        let b = ctx.param(&format!("{}.bias", self.name));
        x.conv2d(w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, groups: usize, channels: usize) -> Self {
        let groups = groups.min(channels).max(1);
        // fall back to the largest divisor so any channel count works
        let groups = (1..=groups).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self { name: name.into(), groups, channels }
    }

    pub fn init(&self, store: &mut ParamStore<f32>) {
        store.insert(format!("{}.gamma", self.name), Array::full(&[self.channels], 1.0));
        store.insert(format!("{}.beta", self.name), Array::zeros(&[self.channels]));
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let g = ctx.param(&format!("{}.gamma", self.name));
        let b = ctx.param(&format!("{}.beta", self.name));
        x.group_norm(self.groups, g, b, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore<f32>) {
        store.insert(format!("{}.gamma", self.name), Array::full(&[self.dim], 1.0));
        store.insert(format!("{}.beta", self.name), Array::zeros(&[self.dim]));
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let g = ctx.param(&format!("{}.gamma", self.name));
        let b = ctx.param(&format!("{}.beta", self.name));
        x.layer_norm(g, b, 1e-5)
    }
}

/// Single-head scaled dot-product attention on `[B, L, D]` tensors with an
/// optional additive `[L, S]` (or broadcastable) score bias.
pub fn attention<'g, T: Scalar>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
    let d = *q.shape().last().expect("attention on scalar");
    let scores = q.matmul_t(k, false, true).scale(T::from_f64(1.0 / (d as f64).sqrt()));
    let scores = match bias {
        Some(b) => scores.add(b),
        None => scores,
    };
    scores.softmax_last().matmul(v)
}

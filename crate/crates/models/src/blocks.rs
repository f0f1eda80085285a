//! Building blocks shared by the denoiser, its control branch and the flow
//! completion network. Feature maps are `[N, C, H, W]` with `N = B·T`
//! (frames of a clip are consecutive).

use rand::Rng;
use vase_autograd::nn::{attention, Conv2d, GroupNorm, LayerNorm, Linear};
use vase_autograd::{Array, Ctx, ParamStore, Scalar, Var};

/// Batch and clip length of a `[B·T, ...]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Clip {
    pub batch: usize,
    pub frames: usize,
}

impl Clip {
    pub fn n(&self) -> usize {
        self.batch * self.frames
    }
}

/// Sinusoidal embedding of one timestep per row, `[rows, dim]`.
pub fn timestep_embedding<T: Scalar>(steps: &[f64], dim: usize) -> Array<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); steps.len() * dim];
    for (r, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            out[r * dim + k] = T::from_f64((t * f).sin());
            out[r * dim + half + k] = T::from_f64((t * f).cos());
        }
    }
    Array::from_vec(&[steps.len(), dim], out)
}

/// Repeat each row of a `[B, D]` tensor `frames` times → `[B·T, D]`.
pub fn per_frame<'g, T: Scalar>(x: Var<'g, T>, frames: usize) -> Var<'g, T> {
    let b = x.shape()[0];
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(frames)).collect();
    x.index_select(&idx)
}

/// Add a `[N, C]` vector to every pixel of a `[N, C, H, W]` map.
pub fn add_channel_bias<'g, T: Scalar>(x: Var<'g, T>, v: Var<'g, T>) -> Var<'g, T> {
    let s = v.shape();
    x + v.reshape(&[s[0], s[1], 1, 1])
}

/// Pre-activation residual block with a timestep-embedding shift.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(format!("{name}.norm1"), groups, cin),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3),
            temb: Linear::new(format!("{name}.temb"), tdim, cout),
            norm2: GroupNorm::new(format!("{name}.norm2"), groups, cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}.skip"), cin, cout, 1)),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.norm1.init(store);
        self.conv1.init(store, rng, false);
        self.temb.init(store, rng, false);
        self.norm2.init(store);
        self.conv2.init(store, rng, false);
        if let Some(s) = &self.skip {
            s.init(store, rng, false);
        }
    }

    /// `temb` is the activated `[N, tdim]` timestep embedding.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, temb: Var<'g, T>) -> Var<'g, T> {
        let h = self.conv1.forward(ctx, self.norm1.forward(ctx, x).silu());
        let h = add_channel_bias(h, self.temb.forward(ctx, temb));
        let h = self.conv2.forward(ctx, self.norm2.forward(ctx, h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, x),
            None => x,
        };
        skip + h
    }
}

/// Cross-attention from every pixel to the single appearance token. With
/// one key the softmax weight is exactly 1, so the attended value is the
/// projected token itself, broadcast over the frame.
#[derive(Clone, Debug)]
pub struct AppCrossAttention {
    to_v: Linear,
    to_out: Linear,
}

impl AppCrossAttention {
    pub fn new(name: &str, app_dim: usize, channels: usize) -> Self {
        Self {
            to_v: Linear::new(format!("{name}.to_v"), app_dim, channels).no_bias(),
            to_out: Linear::new(format!("{name}.to_out"), channels, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.to_v.init(store, rng, false);
        self.to_out.init(store, rng, false);
    }

    /// `app` is `[N, app_dim]` (already repeated per frame).
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, app: Var<'g, T>) -> Var<'g, T> {
        let v = self.to_out.forward(ctx, self.to_v.forward(ctx, app));
        add_channel_bias(x, v)
    }
}

/// Single-head self-attention over the pixels of each frame.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl SpatialAttention {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), channels),
            q: Linear::new(format!("{name}.q"), channels, channels).no_bias(),
            k: Linear::new(format!("{name}.k"), channels, channels).no_bias(),
            v: Linear::new(format!("{name}.v"), channels, channels).no_bias(),
            out: Linear::new(format!("{name}.out"), channels, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.norm.init(store);
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng, false);
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = x.reshape(&[n, c, h * w]).permute(&[0, 2, 1]);
        let y = self.norm.forward(ctx, tokens);
        let a = attention(self.q.forward(ctx, y), self.k.forward(ctx, y), self.v.forward(ctx, y), None);
        let a = self.out.forward(ctx, a).permute(&[0, 2, 1]).reshape(&[n, c, h, w]);
        x + a
    }
}

/// `[B·T, C, H, W]` → `[B·H·W, T, C]`.
pub fn to_temporal<'g, T: Scalar>(x: Var<'g, T>, clip: Clip) -> Var<'g, T> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    x.reshape(&[clip.batch, clip.frames, c, h, w]).permute(&[0, 3, 4, 1, 2]).reshape(&[clip.batch * h * w, clip.frames, c])
}

/// Inverse of [`to_temporal`].
pub fn from_temporal<'g, T: Scalar>(x: Var<'g, T>, clip: Clip, h: usize, w: usize) -> Var<'g, T> {
    let c = x.shape()[2];
    x.reshape(&[clip.batch, h, w, clip.frames, c]).permute(&[0, 3, 4, 1, 2]).reshape(&[clip.n(), c, h, w])
}

/// Kernel-3 convolution along the time axis of `[N, T, C]` with zero padding,
/// as a residual whose projection starts at zero.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    norm: LayerNorm,
    proj: Linear,
    zero_init: bool,
}

impl TemporalConv {
    pub fn new(name: &str, channels: usize, zero_init: bool) -> Self {
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), channels),
            proj: Linear::new(format!("{name}.proj"), 3 * channels, channels),
            zero_init,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.norm.init(store);
        self.proj.init(store, rng, self.zero_init);
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let frames = x.shape()[1];
        let y = self.norm.forward(ctx, x).pad_axis(1, 1, 1);
        let windows: Vec<_> = (0..3).map(|k| y.narrow(1, k, frames)).collect();
        x + self.proj.forward(ctx, Var::concat(&windows, 2))
    }
}

/// Temporal self-attention over the frames at each pixel with a learned
/// relative-position score bias.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    rel: String,
    max_frames: usize,
}

impl TemporalAttention {
    pub fn new(name: &str, channels: usize, max_frames: usize) -> Self {
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), channels),
            q: Linear::new(format!("{name}.q"), channels, channels).no_bias(),
            k: Linear::new(format!("{name}.k"), channels, channels).no_bias(),
            v: Linear::new(format!("{name}.v"), channels, channels).no_bias(),
            out: Linear::new(format!("{name}.out"), channels, channels),
            rel: format!("{name}.rel_bias"),
            max_frames,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.norm.init(store);
        for l in [&self.q, &self.k, &self.v] {
            l.init(store, rng, false);
        }
        self.out.init(store, rng, true);
        store.insert(self.rel.clone(), Array::zeros(&[2 * self.max_frames - 1]));
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let frames = x.shape()[1];
        assert!(frames <= self.max_frames, "clip of {frames} frames exceeds the relative-position table");
        let idx: Vec<usize> =
            (0..frames).flat_map(|i| (0..frames).map(move |j| j + self.max_frames - 1 - i)).collect();
        let bias = ctx.param(&self.rel).index_select(&idx).reshape(&[frames, frames]);
        let y = self.norm.forward(ctx, x);
        let a = attention(self.q.forward(ctx, y), self.k.forward(ctx, y), self.v.forward(ctx, y), Some(bias));
        x + self.out.forward(ctx, a)
    }
}

/// Temporal mixing inserted after each spatial block: convolution then
/// attention along time, both residual and zero-initialised so the inflated
/// network starts as the per-frame network.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    conv: TemporalConv,
    attn: TemporalAttention,
}

impl TemporalBlock {
    pub fn new(name: &str, channels: usize, max_frames: usize) -> Self {
        Self {
            conv: TemporalConv::new(&format!("{name}.conv"), channels, true),
            attn: TemporalAttention::new(&format!("{name}.attn"), channels, max_frames),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.conv.init(store, rng);
        self.attn.init(store, rng);
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, clip: Clip) -> Var<'g, T> {
        let s = x.shape();
        let y = to_temporal(x, clip);
        let y = self.attn.forward(ctx, self.conv.forward(ctx, y));
        from_temporal(y, clip, s[2], s[3])
    }
}
